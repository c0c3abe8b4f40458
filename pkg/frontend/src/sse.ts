// Live audit feed: server-sent events on a dedicated connection, degrading
// to JSON polling when the stream cannot be established.

import type { AuditEventView } from "./state.js";

export interface EventSourceLike {
  onmessage: ((event: { data: string }) => void) | null;
  onerror: ((err: unknown) => void) | null;
  close(): void;
}

export interface FeedOptions {
  since?: number;
  pollIntervalMs?: number;
  sseFactory?: (url: string) => EventSourceLike;
  pollFetch?: (since: number) => Promise<AuditEventView[]>;
  // injectable timer for tests
  setTimer?: (fn: () => void, ms: number) => unknown;
}

export interface FeedHandle {
  stop(): void;
  readonly mode: "sse" | "poll";
}

export function subscribeEvents(
  onEvent: (event: AuditEventView) => void,
  options: FeedOptions = {},
): FeedHandle {
  let since = options.since ?? 0;
  let stopped = false;
  let mode: "sse" | "poll" = "sse";
  let source: EventSourceLike | null = null;
  const setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
  const interval = options.pollIntervalMs ?? 2000;

  const deliver = (event: AuditEventView) => {
    if (event.seq > since) {
      since = event.seq;
      onEvent(event);
    }
  };

  const poll = async () => {
    if (stopped) return;
    try {
      const batch = options.pollFetch
        ? await options.pollFetch(since)
        : ((await (await fetch(`/api/events?since=${since}`)).json())
            .events as AuditEventView[]);
      batch.forEach(deliver);
    } catch {
      // transient; keep polling
    }
    if (!stopped) setTimer(poll, interval);
  };

  const startPolling = () => {
    if (mode === "poll") return;
    mode = "poll";
    if (source) source.close();
    void poll();
  };

  try {
    const factory =
      options.sseFactory ??
      ((url: string) => new EventSource(url) as unknown as EventSourceLike);
    source = factory(`/api/events?stream=1&since=${since}`);
    source.onmessage = (message) => {
      try {
        deliver(JSON.parse(message.data) as AuditEventView);
      } catch {
        // ignore malformed frames
      }
    };
    source.onerror = () => startPolling();
  } catch {
    startPolling();
  }

  return {
    stop() {
      stopped = true;
      if (source) source.close();
    },
    get mode() {
      return mode;
    },
  };
}
