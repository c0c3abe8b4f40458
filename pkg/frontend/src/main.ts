// Console wiring: one queued API client for actions, the event stream on
// its own connection, optimistic updates reconciled against the API
// responses (a 409 on rules triggers a refetch and a retry notice).

import {
  ApiClient,
  ApiError,
  buildAddRule,
  buildApprove,
  buildCommand,
  buildDeny,
  buildEntities,
  buildEventsSince,
  buildPending,
  buildRemoveRule,
  buildRules,
  buildStatus,
  commandTopic,
  type RuleFormBody,
} from "./api.js";
import {
  appendEvents,
  initialState,
  type AuditEventView,
  type ConsoleState,
} from "./state.js";
import { subscribeEvents } from "./sse.js";
import {
  renderCommandPanel,
  renderEntities,
  renderEvents,
  renderNotice,
  renderPending,
  renderRuleForm,
  renderRules,
} from "./views.js";

const client = new ApiClient();
let state: ConsoleState = initialState();
let home = "";

function update(mutate: (s: ConsoleState) => ConsoleState): void {
  state = mutate(state);
  render();
}

function section(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

function render(): void {
  section("notice").innerHTML = renderNotice(state);
  section("entities").innerHTML = renderEntities(state, Date.now());
  section("pending").innerHTML = renderPending(state);
  section("rules").innerHTML = renderRules(state);
  section("rule-form").innerHTML = section("rule-form").innerHTML ||
    renderRuleForm();
  section("command-panel").innerHTML = section("command-panel").innerHTML ||
    renderCommandPanel(home);
  section("events").innerHTML = renderEvents(state);
  const status = state.status;
  section("masthead").textContent = status
    ? `${String(status["home_prefix"])} — policy v${String(status["policy_version"])}`
    : "connecting…";
}

async function refreshAll(): Promise<void> {
  const [status, entities, pending, rules] = await Promise.all([
    client.request<Record<string, unknown>>(buildStatus()),
    client.request<ConsoleState["entities"]>(buildEntities()),
    client.request<ConsoleState["pending"]>(buildPending()),
    client.request<{
      policy_version: number;
      rules: ConsoleState["rules"];
      policies: string[];
    }>(buildRules()),
  ]);
  home = String(status["home_prefix"] ?? "");
  update((s) => ({
    ...s,
    status,
    entities,
    pending,
    rules: rules.rules,
    policies: rules.policies,
    policyVersion: rules.policy_version,
  }));
}

function notice(text: string | null): void {
  update((s) => ({ ...s, notice: text }));
}

async function handleAction(action: string, data: DOMStringMap,
                            form?: HTMLFormElement): Promise<void> {
  const fields = form ? new FormData(form) : new FormData();
  const value = (name: string): string =>
    String(fields.get(name) ?? "").trim();
  try {
    switch (action) {
      case "approve": {
        await client.request(buildApprove(
          data.label ?? "", value("token"), value("service"),
          value("location"),
        ));
        break;
      }
      case "deny": {
        await client.request(buildDeny(data.label ?? ""));
        break;
      }
      case "add-rule": {
        const body: RuleFormBody = {
          verb: value("verb") === "decrypt" ? "decrypt" : "produce",
          subject: {
            service: value("subject_service") || null,
            location: value("subject_location") || null,
            entity: value("subject_entity") || null,
          },
          object: {
            service: value("object_service"),
            resource_kind:
              (value("object_kind") || "CONTENT") as RuleFormBody["object"]["resource_kind"],
            location: value("object_location") || null,
          },
          expected_version: state.policyVersion,
        };
        await client.request(buildAddRule(body));
        break;
      }
      case "remove-rule": {
        await client.request(buildRemoveRule(Number(data.ruleId)));
        break;
      }
      case "command": {
        const topic = commandTopic(
          home, value("service"), value("cmd"),
          value("location") || undefined, value("entity") || undefined,
        );
        let params: unknown = value("params") || "";
        try {
          params = JSON.parse(String(params));
        } catch {
          // plain string payloads pass through unchanged
        }
        await client.request(buildCommand(topic, params));
        notice(`command published to ${topic}`);
        break;
      }
      case "dismiss-notice":
        notice(null);
        return;
      default:
        return;
    }
    await refreshAll();
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      // someone else changed the rules first: reconcile and let the
      // homeowner retry against the fresh version
      await refreshAll();
      notice("rules changed concurrently; review and retry");
    } else {
      notice(err instanceof Error ? err.message : String(err));
    }
  }
}

function bind(): void {
  document.body.addEventListener("submit", (event) => {
    const form = event.target as HTMLFormElement;
    const action = form.dataset.action;
    if (!action) return;
    event.preventDefault();
    void handleAction(action, form.dataset, form);
    form.reset();
  });
  document.body.addEventListener("click", (event) => {
    const el = (event.target as HTMLElement).closest<HTMLElement>("[data-action]");
    if (!el || el.tagName === "FORM") return;
    if (el.tagName !== "BUTTON") return;
    event.preventDefault();
    void handleAction(el.dataset.action ?? "", el.dataset);
  });
}

function startFeed(): void {
  subscribeEvents(
    (event: AuditEventView) => {
      update((s) => appendEvents(s, [event]));
      // registry-affecting events refresh the views behind them
      if (event.kind.startsWith("bootstrap") || event.kind.startsWith("rule")) {
        void refreshAll();
      }
    },
    {
      pollFetch: async (since) =>
        (await client.request<{ events: AuditEventView[] }>(
          buildEventsSince(since),
        )).events,
    },
  );
}

async function start(): Promise<void> {
  bind();
  render();
  await refreshAll();
  const backlog = await client.request<{ events: AuditEventView[] }>(
    buildEventsSince(0),
  );
  update((s) => appendEvents(s, backlog.events));
  startFeed();
}

void start();
