/**
 * Time-remap expression language, mirroring the service grammar:
 * pipelines like "shift(5)|loop(30)|reverse" applied left to right, with
 * the result clamped into [0, frames-1]. Used for inline validation and
 * for the scrubber preview before an expression is posted.
 */

export type TimeOp = { name: string; args: number[] };

const ARITY: Record<string, number> = {
  shift: 1,
  clip: 2,
  reverse: 0,
  loop: 1,
  pause: 1,
  speed: 1,
};

const OP_RE = /^\s*([a-z]+)\s*(?:\(([^)]*)\))?\s*$/;

export function parseTimeMap(expr: string): TimeOp[] {
  const trimmed = expr.trim();
  if (trimmed === "" || trimmed === "id") return [];
  return trimmed.split("|").map((part) => {
    const m = OP_RE.exec(part);
    if (!m) throw new Error(`bad timemap operator '${part}'`);
    const name = m[1];
    if (!(name in ARITY)) throw new Error(`unknown timemap operator '${name}'`);
    const args = m[2] ? m[2].split(",").map((a) => Number(a)) : [];
    if (args.some((a) => Number.isNaN(a))) throw new Error(`non-numeric argument in '${part}'`);
    if (args.length !== ARITY[name])
      throw new Error(`${name} takes ${ARITY[name]} argument(s), got ${args.length}`);
    if (name === "loop" && args[0] < 1) throw new Error("loop period must be >= 1");
    if (name === "clip" && args[0] > args[1]) throw new Error("clip needs a <= b");
    if (name === "speed" && args[0] < 0) throw new Error("speed must be >= 0");
    return { name, args };
  });
}

export function formatTimeMap(ops: TimeOp[]): string {
  if (ops.length === 0) return "id";
  return ops
    .map((op) => (op.args.length ? `${op.name}(${op.args.join(",")})` : op.name))
    .join("|");
}

export function applyTimeMap(ops: TimeOp[], frame: number, frames: number): number {
  let g = frame;
  for (const op of ops) {
    switch (op.name) {
      case "shift":
        g = g - op.args[0];
        break;
      case "clip":
        g = Math.min(Math.max(g, op.args[0]), op.args[1]);
        break;
      case "reverse":
        g = frames - 1 - g;
        break;
      case "loop":
        g = ((g % op.args[0]) + op.args[0]) % op.args[0];
        break;
      case "pause":
        g = op.args[0];
        break;
      case "speed":
        g = Math.floor(g * op.args[0]);
        break;
    }
  }
  return Math.round(Math.min(Math.max(g, 0), frames - 1));
}

/** Validity probe for the editor: null when the expression parses. */
export function timeMapError(expr: string): string | null {
  try {
    parseTimeMap(expr);
    return null;
  } catch (e) {
    return (e as Error).message;
  }
}
