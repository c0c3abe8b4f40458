import { describe, expect, it } from "vitest";

import {
  appendEvent,
  appendEvents,
  applyRules,
  certBadge,
  initialState,
  keyVersionOf,
  MAX_EVENTS,
  type AuditEventView,
} from "../src/state.js";

const event = (seq: number, kind = "rule-added"): AuditEventView =>
  ({ seq, ts: seq * 10, kind, subject: "s", object: "o", outcome: "ok" });

describe("event log", () => {
  it("appends in order and tracks the last sequence", () => {
    let state = initialState();
    state = appendEvents(state, [event(1), event(2)]);
    expect(state.events.map((e) => e.seq)).toEqual([1, 2]);
    expect(state.lastEventSeq).toBe(2);
  });

  it("drops replays from overlapping stream and poll sources", () => {
    let state = appendEvents(initialState(), [event(1), event(2)]);
    state = appendEvents(state, [event(2), event(3)]);
    expect(state.events.map((e) => e.seq)).toEqual([1, 2, 3]);
  });

  it("caps the retained history", () => {
    let state = initialState();
    for (let i = 1; i <= MAX_EVENTS + 50; i++) state = appendEvent(state, event(i));
    expect(state.events.length).toBe(MAX_EVENTS);
    expect(state.events[0]?.seq).toBe(51);
  });
});

describe("rules view", () => {
  it("replaces rules and version wholesale", () => {
    const state = applyRules(initialState(), {
      policy_version: 4,
      rules: [{ id: 1, origin: "user", verb: "produce", subject: {}, object: {} }],
      policies: ["/h/TEMP | produce | /h/TEMP/CONTENT"],
    });
    expect(state.policyVersion).toBe(4);
    expect(state.rules).toHaveLength(1);
    expect(state.policies[0]).toContain("produce");
  });
});

describe("badges", () => {
  it("marks certificates by validity", () => {
    const entity = {
      label: "b", name: "/h/Light/k/b", service: "Light", location: "k",
      cert_name: "/h/Light/k/b/KEY/abc/t=5", cert_not_after: 1000,
      bootstrapped_at: 0, key_grants: [],
    };
    expect(certBadge(entity, 500)).toBe("valid");
    expect(certBadge(entity, 2000)).toBe("expired");
  });

  it("extracts key versions from grant names", () => {
    expect(keyVersionOf("/h/TEMP/DKEY/t=123")).toBe("123");
    expect(keyVersionOf("/h/TEMP/DKEY")).toBe("current");
  });
});
