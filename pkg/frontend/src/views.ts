// Render-to-string views: pure functions from console state to HTML, wired
// up by main.ts through delegated data-action attributes.

import type { ConsoleState, EntityView } from "./state.js";
import { certBadge } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const e = escapeHtml;

export function renderEntities(state: ConsoleState, nowMs: number): string {
  if (!state.entities.length) {
    return `<p class="empty">No entities yet. Approve a bootstrap to add one.</p>`;
  }
  const rows = state.entities
    .map((entity: EntityView) => {
      const grants = entity.key_grants.map((g) => `<code>${e(g)}</code>`).join(" ");
      const badge = certBadge(entity, nowMs);
      return `<tr>
        <td>${e(entity.label)}</td>
        <td><code>${e(entity.name)}</code></td>
        <td>${e(entity.service)} @ ${e(entity.location)}</td>
        <td><span class="badge badge-${badge}">${badge}</span></td>
        <td>${grants || "<em>none</em>"}</td>
      </tr>`;
    })
    .join("");
  return `<table>
    <thead><tr><th>label</th><th>name</th><th>service</th>
    <th>certificate</th><th>key grants</th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

export function renderPending(state: ConsoleState): string {
  if (!state.pending.length) {
    return `<p class="empty">No devices are broadcasting hellos.</p>`;
  }
  const rows = state.pending
    .map(
      (p) => `<tr>
      <td>${e(p.label)}</td>
      <td>${p.count}</td>
      <td>${p.approved ? "armed" : "waiting"}</td>
      <td>
        <form class="inline" data-action="approve" data-label="${e(p.label)}">
          <input name="token" placeholder="token (hex)" required>
          <input name="service" placeholder="service" required>
          <input name="location" placeholder="location" required>
          <button type="submit">approve</button>
        </form>
        <button data-action="deny" data-label="${e(p.label)}">deny</button>
      </td></tr>`,
    )
    .join("");
  return `<table>
    <thead><tr><th>label</th><th>hellos</th><th>state</th><th></th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

export function renderRules(state: ConsoleState): string {
  const rows = state.rules
    .map((rule) => {
      const subject = Object.entries(rule.subject)
        .filter(([, v]) => v)
        .map(([k, v]) => `${k}=${e(String(v))}`)
        .join(" ") || "everyone";
      const object = Object.entries(rule.object)
        .filter(([, v]) => v)
        .map(([k, v]) => `${k}=${e(String(v))}`)
        .join(" ");
      return `<tr>
        <td>${rule.id}</td><td>${e(rule.origin)}</td><td>${e(rule.verb)}</td>
        <td>${subject}</td><td>${object}</td>
        <td><button data-action="remove-rule" data-rule-id="${rule.id}">remove</button></td>
      </tr>`;
    })
    .join("");
  const compiled = state.policies
    .map((line) => `<li><code>${e(line)}</code></li>`)
    .join("");
  return `<p>policy version <strong>${state.policyVersion}</strong></p>
  <table><thead><tr><th>id</th><th>origin</th><th>verb</th><th>subject</th>
  <th>object</th><th></th></tr></thead><tbody>${rows}</tbody></table>
  <details><summary>compiled policies</summary><ul>${compiled}</ul></details>`;
}

export function renderRuleForm(): string {
  return `<form data-action="add-rule" class="stack">
    <label>verb
      <select name="verb"><option>produce</option><option>decrypt</option></select>
    </label>
    <fieldset><legend>subject scope</legend>
      <input name="subject_service" placeholder="service (e.g. AirCon)">
      <input name="subject_location" placeholder="location (optional)">
      <input name="subject_entity" placeholder="entity id (optional)">
    </fieldset>
    <fieldset><legend>object</legend>
      <input name="object_service" placeholder="service (e.g. TEMP)" required>
      <select name="object_kind">
        <option>CONTENT</option><option>CMD</option><option>DKEY</option>
      </select>
      <input name="object_location" placeholder="location (optional)">
    </fieldset>
    <button type="submit">add rule</button>
  </form>`;
}

export function renderCommandPanel(home: string): string {
  return `<form data-action="command" class="stack">
    <label>service <input name="service" placeholder="Light" required></label>
    <label>location <input name="location" placeholder="kitchen (blank = whole home)"></label>
    <label>device <input name="entity" placeholder="bulb-1 (blank = whole room)"></label>
    <label>command <input name="cmd" placeholder="switch-on" required></label>
    <label>parameters <input name="params" placeholder='{"level": 100}'></label>
    <button type="submit">publish</button>
    <p class="hint">home prefix: <code>${e(home)}</code>; leaving scope fields
    blank widens the command to room or home level.</p>
  </form>`;
}

export function renderEvents(state: ConsoleState): string {
  if (!state.events.length) {
    return `<p class="empty">No events yet.</p>`;
  }
  const rows = [...state.events]
    .reverse()
    .map(
      (event) => `<tr class="event-${e(event.kind)}">
      <td>${event.seq}</td><td>${e(event.kind)}</td>
      <td><code>${e(event.subject)}</code></td>
      <td><code>${e(event.object)}</code></td>
      <td>${e(event.outcome)}</td></tr>`,
    )
    .join("");
  return `<table><thead><tr><th>#</th><th>kind</th><th>subject</th>
  <th>object</th><th>outcome</th></tr></thead><tbody>${rows}</tbody></table>`;
}

export function renderNotice(state: ConsoleState): string {
  if (!state.notice) return "";
  return `<div class="notice">${e(state.notice)}
    <button data-action="dismiss-notice">×</button></div>`;
}
