/**
 * Saliency-guided masking operations for external training pipelines.
 *
 * The heavy lifting happens in the salmask package on the other side of
 * a process boundary; this wrapper only moves buffers. All functions
 * are synchronous and stateless, and outputs never alias inputs.
 */
import { readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { BridgeError, runBridge, withScratchDir } from "./bridge";
import { Tensor, decodeSmt1, encodeSmt1 } from "./smt1";

export { BridgeError } from "./bridge";
export { Tensor, TensorData, decodeSmt1, encodeSmt1 } from "./smt1";

export type PlanMode = "positive" | "hardneg" | "random" | "salient-only";
export type Strategy = "highpass" | "blur" | "meanfill";

export interface SaliencyResult {
  /** binary U x V grid, 1 marks foreground cells */
  grid: Tensor;
  /** foreground fraction of the grid */
  gamma: number;
}

export interface PlanResult {
  /** sorted distinct flat cell indices */
  indices: number[];
  /** the sampled masking ratio that set the budget */
  ratio: number;
}

export interface PlanRanges {
  alphaMin?: number;
  alphaMax?: number;
  betaMin?: number;
  betaMax?: number;
}

export interface ApplyOptions {
  /** saliency grid side; image side must be divisible by it (default 8) */
  gridSide?: number;
  /** noise stream seed for the high-pass strategy (default 0) */
  seed?: number;
  /** strategy knobs: blur_size, blur_var, hp_size, hp_var, noise_std */
  params?: Record<string, number>;
}

function parseReply(stdout: string): Record<string, unknown> {
  try {
    return JSON.parse(stdout);
  } catch {
    throw new BridgeError(`bridge reply is not JSON: ${stdout.slice(0, 120)}`);
  }
}

/** ABI identity of the package on the other side of the boundary. */
export function salmaskAbiVersion(): string {
  return runBridge(["bind-abi"]).trim();
}

export function computeSaliency(
  activations: Tensor,
  coeff = 0.6,
): SaliencyResult {
  if (activations.shape.length !== 3) {
    throw new Error(
      `activations want rank 3 (U x V x D), got rank ${activations.shape.length}`);
  }
  return withScratchDir((dir) => {
    const actsPath = join(dir, "acts.smt1");
    const gridPath = join(dir, "grid.smt1");
    writeFileSync(actsPath, encodeSmt1(activations));
    const reply = parseReply(runBridge([
      "bind-saliency", "--activations", actsPath,
      "--coeff", String(coeff), "--out-grid", gridPath,
    ]));
    return {
      grid: decodeSmt1(readFileSync(gridPath)),
      gamma: reply.gamma as number,
    };
  });
}

export function samplePlan(
  grid: Tensor,
  seed: number,
  mode: PlanMode,
  ranges: PlanRanges = {},
): PlanResult {
  if (grid.shape.length !== 2) {
    throw new Error(`grid wants rank 2, got rank ${grid.shape.length}`);
  }
  return withScratchDir((dir) => {
    const gridPath = join(dir, "grid.smt1");
    writeFileSync(gridPath, encodeSmt1(grid));
    const reply = parseReply(runBridge([
      "bind-plan", "--grid", gridPath,
      "--seed", String(seed), "--mode", mode,
      "--alpha-min", String(ranges.alphaMin ?? 0.05),
      "--alpha-max", String(ranges.alphaMax ?? 0.25),
      "--beta-min", String(ranges.betaMin ?? 0.4),
      "--beta-max", String(ranges.betaMax ?? 0.7),
    ]));
    return {
      indices: reply.indices as number[],
      ratio: reply.ratio as number,
    };
  });
}

export function applyStrategy(
  image: Tensor,
  indices: ArrayLike<number>,
  strategy: Strategy,
  options: ApplyOptions = {},
): Tensor {
  if (image.shape.length !== 3 || image.shape[2] !== 3) {
    throw new Error(`image wants H x W x 3, got ${image.shape.join("x")}`);
  }
  const args = [
    "bind-apply",
    "--indices", Array.from(indices).join(","),
    "--strategy", strategy,
    "--seed", String(options.seed ?? 0),
  ];
  if (options.gridSide !== undefined) {
    args.push("--grid-side", String(options.gridSide));
  }
  for (const [key, value] of Object.entries(options.params ?? {})) {
    args.push("--param", `${key}=${value}`);
  }
  return withScratchDir((dir) => {
    const imagePath = join(dir, "image.smt1");
    const outPath = join(dir, "out.smt1");
    writeFileSync(imagePath, encodeSmt1(image));
    runBridge([...args, "--image", imagePath, "--out", outPath]);
    return decodeSmt1(readFileSync(outPath));
  });
}
