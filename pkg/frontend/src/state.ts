// Console state: a mirror of controller responses. The console itself is
// stateless in the security sense; no key material ever reaches it, only
// names, rules and audit metadata.

export interface EntityView {
  label: string;
  name: string;
  service: string;
  location: string;
  cert_name: string;
  cert_not_after: number;
  bootstrapped_at: number;
  key_grants: string[];
}

export interface PendingView {
  label: string;
  first_seen: number;
  last_seen: number;
  count: number;
  approved: boolean;
}

export interface RuleView {
  id: number;
  origin: string;
  verb: string;
  subject: Record<string, unknown>;
  object: Record<string, unknown>;
}

export interface AuditEventView {
  seq: number;
  ts: number;
  kind: string;
  subject: string;
  object: string;
  outcome: string;
}

export interface ConsoleState {
  status: Record<string, unknown> | null;
  entities: EntityView[];
  pending: PendingView[];
  rules: RuleView[];
  policies: string[];
  policyVersion: number;
  events: AuditEventView[];
  lastEventSeq: number;
  notice: string | null;
}

export const MAX_EVENTS = 500;

export function initialState(): ConsoleState {
  return {
    status: null,
    entities: [],
    pending: [],
    rules: [],
    policies: [],
    policyVersion: 0,
    events: [],
    lastEventSeq: 0,
    notice: null,
  };
}

export function applyRules(
  state: ConsoleState,
  listing: { policy_version: number; rules: RuleView[]; policies: string[] },
): ConsoleState {
  return {
    ...state,
    rules: listing.rules,
    policies: listing.policies,
    policyVersion: listing.policy_version,
  };
}

export function appendEvent(
  state: ConsoleState, event: AuditEventView,
): ConsoleState {
  if (event.seq <= state.lastEventSeq) {
    return state; // the SSE stream and the polling fallback may overlap
  }
  const events = [...state.events, event].slice(-MAX_EVENTS);
  return { ...state, events, lastEventSeq: event.seq };
}

export function appendEvents(
  state: ConsoleState, batch: AuditEventView[],
): ConsoleState {
  let next = state;
  for (const event of batch) next = appendEvent(next, event);
  return next;
}

export function certBadge(entity: EntityView, nowMs: number): string {
  return entity.cert_not_after > nowMs ? "valid" : "expired";
}

export function keyVersionOf(grant: string): string {
  const match = grant.match(/\/t=(\d+)$/);
  return match && match[1] !== undefined ? match[1] : "current";
}
