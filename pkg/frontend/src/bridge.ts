/**
 * Process-boundary transport to the salmask CLI.
 *
 * Every operation runs one short-lived subprocess; tensors travel as
 * SMT1 files in a per-call temp directory, scalars come back as one
 * JSON object on stdout. `SALMASK_CLI` overrides the launcher
 * (whitespace-split), e.g. `SALMASK_CLI="python3 -m salmask"`.
 */
import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export class BridgeError extends Error {}

function launcher(): string[] {
  const override = process.env.SALMASK_CLI;
  if (override && override.trim()) {
    return override.trim().split(/\s+/);
  }
  return ["python3", "-m", "salmask"];
}

export function runBridge(args: string[]): string {
  const [cmd, ...prefix] = launcher();
  const proc = spawnSync(cmd as string, [...prefix, ...args], {
    encoding: "utf8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.error) {
    throw new BridgeError(`cannot launch salmask CLI: ${proc.error.message}`);
  }
  if (proc.status !== 0) {
    const detail = (proc.stderr || proc.stdout || "").trim();
    throw new BridgeError(
      `salmask ${args[0]} exited with ${proc.status}: ${detail}`);
  }
  return proc.stdout;
}

export function withScratchDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "salmask-bridge-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}
