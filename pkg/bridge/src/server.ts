/**
 * Serial request loop binding a GenerativeModel to the line protocol.
 *
 * The output stream carries exactly one `{"ready": true}` line followed
 * by one response line per request line, in order.  Diagnostics go to
 * stderr only.  A malformed line yields a "bad_request" error response,
 * a throwing model yields "model_error"; both leave the loop running.
 * End of input shuts the server down cleanly.
 */

import { createInterface } from "node:readline";

import {
  BridgeRequest,
  BridgeResponse,
  Candidate,
  encodeLine,
  parseRequestLine,
} from "./protocol.js";
import {
  Continuation,
  DecodingOptions,
  DEFAULT_DECODING,
  GenerativeModel,
  QUERY_SEPARATOR,
} from "./models.js";

/** Collapse all whitespace runs so the candidate fits on one line. */
export function cleanQuery(text: string): string {
  return text.replace(/\s+/g, " ").trim();
}

/**
 * Score a continuation as exp(mean token log-probability).
 *
 * True log-probabilities are nonpositive, which lands the score in
 * (0, 1]; the clamp only guards models that report something else.
 */
export function scoreContinuation(continuation: Continuation): number {
  const logProbs = continuation.tokenLogProbs;
  const mean = logProbs.reduce((a, b) => a + b, 0) / logProbs.length;
  return Math.min(1, Math.max(0, Math.exp(mean)));
}

/**
 * Answer one request: decode, score, truncate to top_k, then drop
 * candidates below the threshold.  Pure apart from the model call.
 */
export function respond(
  model: GenerativeModel,
  request: BridgeRequest,
  decoding: DecodingOptions,
): BridgeResponse {
  let continuations: Continuation[];
  try {
    const prompt = request.context.join(` ${QUERY_SEPARATOR} `);
    continuations = model.generate(prompt, decoding);
  } catch (e: unknown) {
    const message = e instanceof Error ? e.message : String(e);
    return { request_id: request.request_id, error: { code: "model_error", message } };
  }
  // Several raw continuations may clean to the same query; keep the best.
  const byQuery = new Map<string, Candidate>();
  for (const continuation of continuations) {
    const query = cleanQuery(continuation.text);
    if (query === "" || continuation.tokenLogProbs.length === 0) {
      continue;
    }
    const score = scoreContinuation(continuation);
    const seen = byQuery.get(query);
    if (seen === undefined || score > seen.score) {
      byQuery.set(query, { query, score });
    }
  }
  const candidates = [...byQuery.values()]
    .sort((a, b) => b.score - a.score)
    .slice(0, request.top_k)
    .filter((c) => c.score >= request.threshold);
  return { request_id: request.request_id, candidates };
}

export interface ServeOptions {
  model: GenerativeModel;
  input: NodeJS.ReadableStream;
  output: NodeJS.WritableStream;
  decoding?: Partial<DecodingOptions>;
}

export async function serve(options: ServeOptions): Promise<void> {
  const { model, input, output } = options;
  const decoding = { ...DEFAULT_DECODING, ...options.decoding };
  output.write(JSON.stringify({ ready: true }) + "\n");

  const rl = createInterface({ input, crlfDelay: Number.POSITIVE_INFINITY });
  for await (const line of rl) {
    if (line.trim() === "") {
      // A blank line carries no request; answering it would desync the
      // one-response-per-request pairing the host relies on.
      continue;
    }
    const parsed = parseRequestLine(line);
    let response: BridgeResponse;
    if (parsed.ok) {
      response = respond(model, parsed.request, decoding);
    } else {
      console.error(`[bridge] bad request: ${parsed.message}`);
      response = {
        request_id: parsed.requestId,
        error: { code: "bad_request", message: parsed.message },
      };
    }
    if ("error" in response && response.error.code === "model_error") {
      console.error(`[bridge] model ${model.name} failed: ${response.error.message}`);
    }
    output.write(encodeLine(response));
  }
}
