import { describe, expect, it } from "vitest";
import { applyTimeMap, formatTimeMap, parseTimeMap, timeMapError } from "../src/timemap.js";

describe("timemap expressions", () => {
  it("round-trips through parse and format", () => {
    for (const expr of ["id", "shift(5)", "shift(5)|loop(30)|reverse", "clip(2,9)|speed(0.5)"]) {
      expect(formatTimeMap(parseTimeMap(expr))).toBe(expr);
    }
  });

  it("applies operators like the service does", () => {
    const frames = 64;
    expect(applyTimeMap(parseTimeMap("shift(4)"), 10, frames)).toBe(6);
    expect(applyTimeMap(parseTimeMap("reverse|reverse"), 17, frames)).toBe(17);
    expect(applyTimeMap(parseTimeMap("pause(7)"), 50, frames)).toBe(7);
    for (let g = 0; g < frames; g++) {
      const v = applyTimeMap(parseTimeMap("clip(5,20)"), g, frames);
      expect(v).toBeGreaterThanOrEqual(5);
      expect(v).toBeLessThanOrEqual(20);
      expect(applyTimeMap(parseTimeMap("loop(13)"), g, frames)).toBe(
        applyTimeMap(parseTimeMap("loop(13)"), g + 13, frames),
      );
    }
  });

  it("clamps into the frame range", () => {
    expect(applyTimeMap(parseTimeMap("shift(100)"), 3, 16)).toBe(0);
    expect(applyTimeMap(parseTimeMap("shift(-100)"), 3, 16)).toBe(15);
  });

  it("reports validity for the editor preview", () => {
    expect(timeMapError("shift(3)|reverse")).toBeNull();
    expect(timeMapError("warp(3)")).toMatch(/unknown/);
    expect(timeMapError("shift(1,2)")).toMatch(/argument/);
    expect(timeMapError("loop(0)")).toMatch(/period/);
    expect(timeMapError("clip(9,1)")).toMatch(/a <= b/);
  });
});
