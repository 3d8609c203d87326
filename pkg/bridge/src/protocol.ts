/**
 * Wire types for the stdio JSON-lines protocol.
 *
 * The host process writes one request object per line and reads exactly
 * one response line back.  A response either carries candidates (scores
 * descending, all in [0, 1]) or an error object, never both.  Everything
 * here is schema plus parsing helpers; no I/O.
 */

import { z } from "zod";

export const requestSchema = z.strictObject({
  /** Queries already executed in the session, oldest first. */
  context: z.array(z.string()).min(1),
  /** Maximum number of candidates to return. */
  top_k: z.int().positive(),
  /** Minimum score a candidate must reach, applied after top_k truncation. */
  threshold: z.number().min(0).max(1),
  /** Opaque token echoed in the response so the host can pair lines. */
  request_id: z.string(),
});

export type BridgeRequest = z.infer<typeof requestSchema>;

export const candidateSchema = z.strictObject({
  query: z.string().min(1),
  score: z.number().min(0).max(1),
});

export type Candidate = z.infer<typeof candidateSchema>;

function descending(candidates: Candidate[]): boolean {
  return candidates.every((c, i) => i === 0 || candidates[i - 1].score >= c.score);
}

export const successSchema = z
  .strictObject({
    request_id: z.string(),
    candidates: z.array(candidateSchema),
  })
  .refine((r) => descending(r.candidates), {
    message: "candidate scores must be sorted descending",
  });

export const errorSchema = z.strictObject({
  request_id: z.string(),
  error: z.strictObject({
    code: z.string(),
    message: z.string(),
  }),
});

export const responseSchema = z.union([successSchema, errorSchema]);

export type BridgeResponse = z.infer<typeof responseSchema>;

export type ParsedLine =
  | { ok: true; request: BridgeRequest }
  | { ok: false; requestId: string; message: string };

/**
 * Parse one raw input line into a request.
 *
 * On failure the result still carries whatever request_id could be
 * recovered from the line (empty string when none), so the caller can
 * emit an addressed error response instead of going silent.
 */
export function parseRequestLine(line: string): ParsedLine {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch (e: unknown) {
    const message = e instanceof Error ? e.message : String(e);
    return { ok: false, requestId: "", message: `invalid JSON: ${message}` };
  }
  const result = requestSchema.safeParse(raw);
  if (result.success) {
    return { ok: true, request: result.data };
  }
  let requestId = "";
  if (typeof raw === "object" && raw !== null) {
    const candidate = (raw as Record<string, unknown>).request_id;
    if (typeof candidate === "string") {
      requestId = candidate;
    }
  }
  return { ok: false, requestId, message: result.error.issues[0]?.message ?? "invalid request" };
}

export function encodeLine(response: BridgeResponse): string {
  return JSON.stringify(response) + "\n";
}
