import { describe, expect, it } from "vitest";

import { subscribeEvents, type EventSourceLike } from "../src/sse.js";
import type { AuditEventView } from "../src/state.js";

const event = (seq: number): AuditEventView =>
  ({ seq, ts: seq, kind: "k", subject: "s", object: "o", outcome: "ok" });

class FakeSource implements EventSourceLike {
  onmessage: ((e: { data: string }) => void) | null = null;
  onerror: ((err: unknown) => void) | null = null;
  closed = false;
  close(): void { this.closed = true; }
  emit(payload: AuditEventView): void {
    this.onmessage?.({ data: JSON.stringify(payload) });
  }
}

describe("event feed", () => {
  it("delivers stream events once, in order", () => {
    const source = new FakeSource();
    const seen: number[] = [];
    const handle = subscribeEvents((e) => seen.push(e.seq), {
      sseFactory: () => source,
      pollFetch: async () => [],
    });
    source.emit(event(1));
    source.emit(event(1)); // duplicate
    source.emit(event(2));
    expect(seen).toEqual([1, 2]);
    expect(handle.mode).toBe("sse");
    handle.stop();
    expect(source.closed).toBe(true);
  });

  it("falls back to polling when the stream errors", async () => {
    const source = new FakeSource();
    const seen: number[] = [];
    const timers: Array<() => void> = [];
    const batches: AuditEventView[][] = [[event(1)], [event(2)], []];
    const handle = subscribeEvents((e) => seen.push(e.seq), {
      sseFactory: () => source,
      pollFetch: async () => batches.shift() ?? [],
      setTimer: (fn) => timers.push(fn),
    });
    source.onerror?.(new Error("stream lost"));
    await Promise.resolve();
    await Promise.resolve();
    expect(handle.mode).toBe("poll");
    expect(source.closed).toBe(true);
    expect(seen).toEqual([1]);
    timers.shift()?.();
    await new Promise((r) => setTimeout(r, 0));
    expect(seen).toEqual([1, 2]);
    handle.stop();
  });

  it("keeps polling through transient fetch failures", async () => {
    const timers: Array<() => void> = [];
    let calls = 0;
    const seen: number[] = [];
    const handle = subscribeEvents((e) => seen.push(e.seq), {
      sseFactory: () => { throw new Error("no EventSource here"); },
      pollFetch: async () => {
        calls += 1;
        if (calls === 1) throw new Error("flaky");
        return [event(5)];
      },
      setTimer: (fn) => timers.push(fn),
    });
    await new Promise((r) => setTimeout(r, 0));
    expect(handle.mode).toBe("poll");
    timers.shift()?.();
    await new Promise((r) => setTimeout(r, 0));
    expect(seen).toEqual([5]);
    handle.stop();
  });
});
