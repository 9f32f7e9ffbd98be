/**
 * OCR sidecar: one JSON object per line over stdin/stdout.
 *
 * The process emits a hello line first, then answers each request line with
 * exactly one response line, in order. Echo and fixture modes have no
 * dependencies beyond node itself; model mode shells out to a user-supplied
 * command so any OCR model can be plugged in without changing the protocol.
 *
 * Protocol (UTF-8, LF):
 *   hello:    {"op":"hello","engine":"ocr-sidecar","version":"1.0.0","ok":true}
 *   request:  {"id":"<s>","op":"ping"} | {"id":"<s>","op":"ocr","image_path":"<path>"}
 *   response: {"id":"<s>","ok":true}                                  (ping)
 *             {"id":"<s>","ok":true,"text":"<s>","duration_ms":<int>} (ocr)
 *             {"id":"<s>","ok":false,"error":"<s>"}
 * A non-JSON or shapeless line gets {"id":null,"ok":false,"error":"protocol"}
 * and the loop continues. Closing stdin requests a clean exit (code 0).
 */

import { execSync } from "node:child_process";
import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { basename, join } from "node:path";
import { performance } from "node:perf_hooks";
import { createInterface } from "node:readline";

type Mode = "echo" | "fixture" | "model";

interface Options {
  mode: Mode;
  fixtureDir?: string;
  modelCmd?: string;
}

const USAGE =
  "usage: ocr-sidecar --mode echo|fixture|model [--fixture-dir <path>] [--model-cmd <template with {input}>]";

function parseArgs(argv: string[]): Options {
  let mode: string = "echo";
  let fixtureDir: string | undefined;
  let modelCmd: string | undefined;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--mode") mode = argv[++i] ?? "";
    else if (arg === "--fixture-dir") fixtureDir = argv[++i];
    else if (arg === "--model-cmd") modelCmd = argv[++i];
    else usageError(`unknown argument ${arg}`);
  }
  if (mode !== "echo" && mode !== "fixture" && mode !== "model") {
    usageError(`unknown mode ${JSON.stringify(mode)}`);
  }
  if (mode === "fixture" && !fixtureDir) {
    usageError("fixture mode requires --fixture-dir");
  }
  if (mode === "model" && (!modelCmd || !modelCmd.includes("{input}"))) {
    usageError("model mode requires --model-cmd containing {input}");
  }
  return { mode: mode as Mode, fixtureDir, modelCmd };
}

function usageError(message: string): never {
  process.stderr.write(`${message}\n${USAGE}\n`);
  process.exit(2);
}

type Reply = Record<string, unknown>;

function emit(obj: Reply): void {
  process.stdout.write(JSON.stringify(obj) + "\n");
}

/** Responses always serialize keys as id, ok, text, duration_ms, error. */
function reply(
  id: string | null,
  ok: boolean,
  text?: string,
  durationMs?: number,
  error?: string,
): Reply {
  const out: Reply = { id, ok };
  if (text !== undefined) out.text = text;
  if (durationMs !== undefined) out.duration_ms = durationMs;
  if (error !== undefined) out.error = error;
  return out;
}

const PROTOCOL_ERROR = reply(null, false, undefined, undefined, "protocol");

function shellQuote(path: string): string {
  return `'${path.replace(/'/g, `'\\''`)}'`;
}

function handle(req: Record<string, unknown>, opts: Options): Reply {
  const op = req["op"];
  const id = req["id"];
  if (typeof id !== "string" || (op !== "ping" && op !== "ocr")) {
    return PROTOCOL_ERROR;
  }
  if (op === "ping") return reply(id, true);
  const imagePath = req["image_path"];
  if (typeof imagePath !== "string") return PROTOCOL_ERROR;

  if (opts.mode === "echo") {
    return reply(id, true, `ECHO ${basename(imagePath)}`, 0);
  }
  const t0 = performance.now();
  if (opts.mode === "fixture") {
    try {
      const digest = createHash("sha256").update(readFileSync(imagePath)).digest("hex");
      const text = readFileSync(join(opts.fixtureDir!, `${digest}.txt`), "utf-8");
      return reply(id, true, text, Math.round(performance.now() - t0));
    } catch {
      return reply(id, false, undefined, undefined, "not_found");
    }
  }
  try {
    const cmd = opts.modelCmd!.replaceAll("{input}", shellQuote(imagePath));
    const text = execSync(cmd, { encoding: "utf-8", stdio: ["ignore", "pipe", "ignore"] });
    return reply(id, true, text, Math.round(performance.now() - t0));
  } catch {
    return reply(id, false, undefined, undefined, "model_failed");
  }
}

function main(): void {
  const opts = parseArgs(process.argv.slice(2));
  // Model startup cost belongs here, before hello, so per-request timings
  // reflect inference only. The shell-out stand-in has nothing to preload.
  emit({ op: "hello", engine: "ocr-sidecar", version: "1.0.0", ok: true });

  const rl = createInterface({ input: process.stdin, terminal: false });
  rl.on("line", (line: string) => {
    const trimmed = line.trim();
    if (!trimmed) return;
    let parsed: unknown;
    try {
      parsed = JSON.parse(trimmed);
    } catch {
      emit(PROTOCOL_ERROR);
      return;
    }
    if (typeof parsed !== "object" || parsed === null || Array.isArray(parsed)) {
      emit(PROTOCOL_ERROR);
      return;
    }
    emit(handle(parsed as Record<string, unknown>, opts));
  });
  rl.on("close", () => process.exit(0));
}

main();
