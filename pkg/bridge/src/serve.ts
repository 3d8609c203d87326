/**
 * Command-line entry point.
 *
 * Usage: node dist/serve.js <model-spec> [--beam-width N] [--max-new-tokens N]
 *
 * Speaks the JSON-lines protocol on stdin/stdout and exits when the
 * host closes stdin.  Anything human-readable goes to stderr.
 */

import { createModel, DEFAULT_DECODING } from "./models.js";
import { serve } from "./server.js";

function usage(): never {
  console.error("usage: serve.js <model-spec> [--beam-width N] [--max-new-tokens N]");
  process.exit(2);
}

async function main(): Promise<void> {
  const args = process.argv.slice(2);
  let spec: string | undefined;
  const decoding = { ...DEFAULT_DECODING };
  for (let i = 0; i < args.length; i++) {
    const arg = args[i];
    if (arg === "--beam-width" || arg === "--max-new-tokens") {
      const value = Number(args[++i]);
      if (!Number.isInteger(value) || value < 1) {
        usage();
      }
      if (arg === "--beam-width") {
        decoding.beamWidth = value;
      } else {
        decoding.maxNewTokens = value;
      }
    } else if (spec === undefined && !arg.startsWith("-")) {
      spec = arg;
    } else {
      usage();
    }
  }
  if (spec === undefined) {
    usage();
  }
  const model = createModel(spec);
  await serve({ model, input: process.stdin, output: process.stdout, decoding });
}

main().catch((e) => {
  process.stderr.write(`[bridge] fatal: ${e instanceof Error ? e.message : e}\n`);
  process.exit(1);
});
