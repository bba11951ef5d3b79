#!/usr/bin/env node
/**
 * Entry point: resolve a backend, then serve the stdio protocol forever.
 *
 *   node dist/main.js [--backend "<command>"] [--timeout <seconds>]
 *
 * Without a resolvable backend (flag, $MOLRL_XTB_BACKEND, or an `xtb`
 * binary on PATH) a startup error object is emitted and the process exits
 * nonzero.
 */

import { resolveBackend } from "./backend";
import { AdapterServer } from "./server";

function parseArgs(argv: string[]): { backend?: string[]; timeoutMs: number } {
  let backend: string[] | undefined;
  let timeoutMs = 60_000;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--backend" && argv[i + 1]) {
      backend = argv[++i].split(/\s+/);
    } else if (argv[i] === "--timeout" && argv[i + 1]) {
      timeoutMs = Math.round(Number(argv[++i]) * 1000);
      if (!Number.isFinite(timeoutMs) || timeoutMs <= 0) {
        throw new Error(`bad --timeout value: ${argv[i]}`);
      }
    } else {
      throw new Error(`unknown argument: ${argv[i]}`);
    }
  }
  return { backend, timeoutMs };
}

async function main(): Promise<number> {
  let options;
  try {
    options = parseArgs(process.argv.slice(2));
  } catch (err) {
    process.stdout.write(JSON.stringify({ id: -1, error: String(err) }) + "\n");
    return 2;
  }
  const backend = resolveBackend({
    backendCommand: options.backend,
    timeoutMs: options.timeoutMs,
  });
  if (backend === null) {
    process.stdout.write(
      JSON.stringify({
        id: -1,
        error:
          "no backend resolvable: pass --backend, set MOLRL_XTB_BACKEND," +
          " or install xtb on PATH",
      }) + "\n"
    );
    return 1;
  }
  const server = new AdapterServer(backend);
  await server.serve(process.stdin, process.stdout);
  backend.close();
  return 0;
}

main().then((code) => {
  process.exitCode = code;
});
