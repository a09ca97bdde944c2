/**
 * Entry point: serve the hosted model over stdio.
 *
 * Flags: --model <id> --device <dev> --dimension <d> --seed <n>
 *        --readout {option_letter_logits|constrained_decode}
 *        --non-deterministic
 */

import process from "node:process";

import { DEFAULT_CONFIG, ReferenceVisionLanguageModel, type AdapterConfig } from "./model.js";
import { serveStreams } from "./server.js";

function parseArgs(argv: string[]): AdapterConfig {
  const config: AdapterConfig = { ...DEFAULT_CONFIG };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      const value = argv[++i];
      if (value === undefined) {
        throw new Error(`flag ${flag} needs a value`);
      }
      return value;
    };
    switch (flag) {
      case "--model":
        config.modelIdentifier = next();
        break;
      case "--device":
        config.device = next();
        break;
      case "--dimension":
        config.dimension = Number.parseInt(next(), 10);
        break;
      case "--seed":
        config.seed = Number.parseInt(next(), 10);
        break;
      case "--readout": {
        const value = next();
        if (value !== "option_letter_logits" && value !== "constrained_decode") {
          throw new Error(`unknown readout '${value}'`);
        }
        config.answerReadout = value;
        break;
      }
      case "--non-deterministic":
        config.deterministic = false;
        break;
      default:
        throw new Error(`unknown flag '${flag}'`);
    }
  }
  return config;
}

async function main(): Promise<void> {
  const config = parseArgs(process.argv.slice(2));
  // Model construction is deferred to handshake so load failures surface
  // as protocol error 4 rather than a dead process.
  await serveStreams(
    () => new ReferenceVisionLanguageModel(config),
    process.stdin,
    process.stdout,
  );
  // Give stdout a chance to drain before exiting.
  await new Promise<void>((resolve) => {
    if (process.stdout.writableLength === 0) {
      resolve();
    } else {
      process.stdout.once("drain", () => resolve());
    }
  });
  process.exit(0);
}

main().catch((error) => {
  process.stderr.write(`adapter failed: ${(error as Error).message}\n`);
  process.exit(1);
});
