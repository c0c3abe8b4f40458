// Request builders and the queued API client. Every console action maps to
// exactly one of these builders, so anything the console does is equally
// scriptable with curl; the builders are snapshot into a committed fixture
// that the controller-side parity test replays verbatim.

export interface RequestSpec {
  method: "GET" | "POST" | "DELETE";
  path: string;
  body?: unknown;
}

export interface RuleSubject {
  service?: string | null;
  location?: string | null;
  entity?: string | null;
  name?: string | null;
}

export interface RuleObject {
  service: string;
  resource_kind: "CMD" | "CONTENT" | "DKEY";
  location?: string | null;
}

export interface RuleFormBody {
  verb: "produce" | "decrypt";
  subject: RuleSubject;
  object: RuleObject;
  expected_version?: number;
}

export const buildStatus = (): RequestSpec =>
  ({ method: "GET", path: "/api/status" });

export const buildEntities = (): RequestSpec =>
  ({ method: "GET", path: "/api/entities" });

export const buildRules = (): RequestSpec =>
  ({ method: "GET", path: "/api/rules" });

export const buildPending = (): RequestSpec =>
  ({ method: "GET", path: "/api/bootstrap/pending" });

export const buildEventsSince = (since: number): RequestSpec =>
  ({ method: "GET", path: `/api/events?since=${since}` });

export const buildApprove = (
  label: string, token: string, service: string, location: string,
): RequestSpec => ({
  method: "POST",
  path: "/api/bootstrap/approve",
  body: { label, token, service, location },
});

export const buildDeny = (label: string): RequestSpec =>
  ({ method: "POST", path: "/api/bootstrap/deny", body: { label } });

export const buildAddRule = (form: RuleFormBody): RequestSpec =>
  ({ method: "POST", path: "/api/rules", body: form });

export const buildRemoveRule = (ruleId: number): RequestSpec =>
  ({ method: "DELETE", path: `/api/rules/${ruleId}` });

export const buildRotateKey = (scope: string): RequestSpec =>
  ({ method: "POST", path: "/api/keys/rotate", body: { scope } });

export const buildCommand = (
  topic: string, params: unknown, redundancy = 2,
): RequestSpec => ({
  method: "POST",
  path: "/api/commands",
  body: { topic, params, redundancy },
});

// Command names follow the home convention at three granularities:
// device level (location + entity), room level (location), home level.
export function commandTopic(
  home: string, service: string, cmdId: string,
  location?: string, entity?: string,
): string {
  const parts = [home.replace(/\/$/, ""), service];
  if (location) parts.push(location);
  if (location && entity) parts.push(entity);
  parts.push("CMD", cmdId);
  return parts.join("/");
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`${status}: ${detail}`);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

// One client, one outstanding request at a time: responses apply to the
// console state in the order the user acted.
export class ApiClient {
  private queue: Promise<unknown> = Promise.resolve();

  constructor(
    private base: string = "",
    private fetcher: FetchLike = (url, init) => fetch(url, init),
  ) {}

  request<T = unknown>(spec: RequestSpec): Promise<T> {
    const run = async (): Promise<T> => {
      const init: RequestInit = { method: spec.method };
      if (spec.body !== undefined) {
        init.headers = { "content-type": "application/json" };
        init.body = JSON.stringify(spec.body);
      }
      const response = await this.fetcher(this.base + spec.path, init);
      const text = await response.text();
      const payload = text ? JSON.parse(text) : null;
      if (!response.ok) {
        const detail =
          payload && typeof payload === "object"
            ? JSON.stringify(payload)
            : text;
        throw new ApiError(response.status, detail);
      }
      return payload as T;
    };
    const next = this.queue.then(run, run);
    this.queue = next.catch(() => undefined); // keep the queue alive
    return next;
  }
}
