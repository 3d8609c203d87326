/**
 * Model abstraction behind the bridge.
 *
 * A GenerativeModel sees one prompt string (session queries joined with
 * QUERY_SEPARATOR) and returns raw continuations with per-token
 * log-probabilities.  Scoring and cleanup live in the server so every
 * model is normalized the same way; implementations only have to decode.
 *
 * The bundled stub needs no weights: it echoes the last query of the
 * prompt as its best continuation and pads the beam with derived
 * variants at geometrically decaying likelihoods.  That makes protocol
 * behaviour fully predictable for tests and smoke runs.
 */

/** Token placed between consecutive session queries in the prompt. */
export const QUERY_SEPARATOR = "</q>";

export interface Continuation {
  /** Generated text; may contain arbitrary whitespace before cleanup. */
  text: string;
  /** Natural-log probability of each generated token. */
  tokenLogProbs: number[];
}

export interface DecodingOptions {
  beamWidth: number;
  maxNewTokens: number;
}

export const DEFAULT_DECODING: DecodingOptions = {
  beamWidth: 8,
  maxNewTokens: 16,
};

export interface GenerativeModel {
  readonly name: string;
  /** Return up to beamWidth continuations, best first, deterministically. */
  generate(prompt: string, options: DecodingOptions): Continuation[];
}

// Beam i (i >= 1) appends SUFFIXES[i - 1] to the echoed query and carries
// a constant per-token log-probability of ln(1 / (i + 1)), so the server's
// exp-mean scoring lands on 1 / (i + 1) up to floating-point rounding.
const SUFFIXES = ["again", "online", "reviews", "near me", "cost", "meaning", "examples"];

export class StubModel implements GenerativeModel {
  readonly name = "stub";

  generate(prompt: string, options: DecodingOptions): Continuation[] {
    const segments = prompt.split(QUERY_SEPARATOR);
    const last = segments[segments.length - 1].trim();
    if (last === "") {
      return [];
    }
    const beams: Continuation[] = [];
    const limit = Math.min(options.beamWidth, SUFFIXES.length + 1);
    for (let i = 0; i < limit; i++) {
      const text = i === 0 ? last : `${last} ${SUFFIXES[i - 1]}`;
      const tokens = text.split(/\s+/).slice(0, options.maxNewTokens);
      const logProb = i === 0 ? 0 : Math.log(1 / (i + 1));
      beams.push({
        text: tokens.join(" "),
        tokenLogProbs: tokens.map(() => logProb),
      });
    }
    return beams;
  }
}

/**
 * Resolve a model spec string from the launch command line.
 *
 * Only the weight-free "stub" spec ships with the bridge; specs for real
 * checkpoints are expected to slot in here without touching the server.
 */
export function createModel(spec: string): GenerativeModel {
  if (spec === "stub") {
    return new StubModel();
  }
  throw new Error(`unknown model spec ${JSON.stringify(spec)}; available: stub`);
}
