// Session screen wiring: one in-flight request at a time, server state is
// the single source of truth, session id kept in the URL hash so a reload
// lands back on the same session.

import { ApiError, SessionApi } from "./api.js";
import type { PendingView, SessionState } from "./api.js";
import { deriveView, formatCoords, pairPlotSvg } from "./view.js";

export interface AppElements {
  root: HTMLElement;
}

export class App {
  api: SessionApi;
  state: SessionState | null = null;
  pending: PendingView | null = null;
  inFlight = false;

  constructor(
    public root: HTMLElement,
    baseUrl: string,
  ) {
    this.api = new SessionApi(baseUrl);
  }

  get sessionId(): string | null {
    return this.state?.session_id ?? null;
  }

  async start(budget: number, querySize: number, seed?: number) {
    await this.guard(async () => {
      this.state = await this.api.createSession(budget, querySize, seed);
      this.pending = await this.api.proposePair(this.state.session_id);
      this.syncHash();
    });
  }

  /** Re-attach to an existing session (page reload). */
  async resume(sessionId: string) {
    await this.guard(async () => {
      this.state = await this.api.sessionState(sessionId);
      this.pending = this.state.pending_view ?? null;
      if (
        !this.pending &&
        this.state.status === "active" &&
        this.state.step < this.state.budget
      ) {
        this.pending = await this.api.proposePair(sessionId);
      }
      this.syncHash();
    });
  }

  async answer(choice: "left" | "right") {
    if (!this.state || !this.pending) return;
    const id = this.state.session_id;
    await this.guard(async () => {
      this.state = await this.api.submitPreference(id, choice === "left" ? 0 : 1);
      this.pending = null;
      if (this.state.status === "active" && this.state.step < this.state.budget) {
        this.pending = await this.api.proposePair(id);
      }
    });
  }

  /** Serializes mutations: a second call while one is running is dropped
   * (this is the double-click suppression). */
  private async guard(fn: () => Promise<void>) {
    if (this.inFlight) return;
    this.inFlight = true;
    this.render(); // disable buttons immediately
    try {
      await fn();
      this.clearError();
    } catch (err) {
      if (err instanceof ApiError) this.showError(`${err.code}: ${err.message}`);
      else this.showError(String(err));
    } finally {
      this.inFlight = false;
      this.render();
    }
  }

  private syncHash() {
    if (this.sessionId && typeof window !== "undefined") {
      window.location.hash = this.sessionId;
    }
  }

  private errorText = "";
  private showError(text: string) {
    this.errorText = text;
  }
  private clearError() {
    this.errorText = "";
  }

  render() {
    const v = deriveView(this.state, this.pending);
    const disabled = this.inFlight ? "disabled" : "";
    let main = "";
    if (v.screen === "start") {
      main = `
        <section class="start">
          <label>Budget <input id="budget" type="number" value="10" min="1"></label>
          <label>Candidates <input id="query-size" type="number" value="32" min="2"></label>
          <button id="start-btn" ${disabled}>Start session</button>
        </section>`;
    } else if (v.screen === "duel") {
      const plot =
        v.plotDim > 0
          ? `<div class="plot">${pairPlotSvg(
              v.cards[0].coords,
              v.cards[1].coords,
              v.plotDim as 1 | 2,
            )}</div>`
          : "";
      main = `
        <section class="duel">
          <p class="progress">Duel <span id="step">${v.step}</span> of <span id="budget-total">${v.budget}</span></p>
          <progress max="${v.budget}" value="${v.step - 1}"></progress>
          <div class="cards">
            ${v.cards
              .map(
                (c, i) => `
              <div class="card" data-card="${i}">
                <h3>${c.title}</h3>
                <table>${c.coords
                  .map(
                    (x, d) =>
                      `<tr><td>x${d + 1}</td><td>${x.toFixed(4)}</td></tr>`,
                  )
                  .join("")}</table>
                <button class="choose" data-choice="${i === 0 ? "left" : "right"}" ${disabled}>
                  Prefer ${c.title}
                </button>
              </div>`,
              )
              .join("")}
          </div>
          ${plot}
        </section>`;
    } else if (v.screen === "done") {
      main = `
        <section class="done">
          <h2>Session complete</h2>
          <p>${v.step} duels answered.</p>
        </section>`;
    } else {
      main = `<section class="waiting"><p>Working…</p></section>`;
    }

    const history = v.history
      .map((h) => {
        const win = h.winner === 0 ? formatCoords(h.x1) : formatCoords(h.x2);
        const lose = h.winner === 0 ? formatCoords(h.x2) : formatCoords(h.x1);
        return `<li>step ${h.step}: <strong>(${win})</strong> over (${lose})</li>`;
      })
      .join("");
    const belief = v.belief
      .map(
        (b) =>
          `<li>#${b.rank + 1} (${formatCoords(b.point)}) — score ${b.mean.toFixed(3)}</li>`,
      )
      .join("");

    this.root.innerHTML = `
      <div class="error" role="alert">${this.errorText}</div>
      ${main}
      <aside class="panels">
        <div class="history-panel"><h2>History</h2><ol id="history">${history}</ol></div>
        <div class="belief-panel"><h2>Current belief</h2><ol id="belief">${belief}</ol></div>
      </aside>`;

    this.bind();
  }

  private bind() {
    const start = this.root.querySelector<HTMLButtonElement>("#start-btn");
    if (start) {
      start.addEventListener("click", () => {
        const budget = Number(
          this.root.querySelector<HTMLInputElement>("#budget")?.value ?? "10",
        );
        const qs = Number(
          this.root.querySelector<HTMLInputElement>("#query-size")?.value ?? "32",
        );
        void this.start(budget, qs);
      });
    }
    for (const btn of this.root.querySelectorAll<HTMLButtonElement>(".choose")) {
      btn.addEventListener("click", () => {
        void this.answer(btn.dataset.choice as "left" | "right");
      });
    }
  }
}

export function defaultBaseUrl(): string {
  if (typeof window === "undefined") return "http://127.0.0.1:8000";
  const params = new URLSearchParams(window.location.search);
  return (
    params.get("service") ??
    window.localStorage.getItem("service-base-url") ??
    "http://127.0.0.1:8000"
  );
}
