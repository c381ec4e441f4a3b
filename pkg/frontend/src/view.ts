// Pure view-state derivation: the screen is a function of the latest
// session state plus the pending pair, nothing else. A page reload that
// re-fetches both reconstructs the identical screen.

import type { PendingView, SessionState } from "./api.js";

export interface DuelCard {
  title: string;
  coords: number[];
}

export interface ViewState {
  screen: "start" | "duel" | "waiting" | "done";
  step: number;
  budget: number;
  cards: DuelCard[];
  history: { step: number; x1: number[]; x2: number[]; winner: 0 | 1 }[];
  belief: { point: number[]; mean: number; rank: number }[];
  plotDim: 0 | 1 | 2; // 0 = table only
}

export function deriveView(
  state: SessionState | null,
  pending: PendingView | null,
): ViewState {
  if (!state) {
    return {
      screen: "start",
      step: 0,
      budget: 0,
      cards: [],
      history: [],
      belief: [],
      plotDim: 0,
    };
  }
  const history = state.history_labels.map((label, i) => ({
    step: i + 1,
    x1: state.history_x1[i],
    x2: state.history_x2[i],
    winner: (label === 0 ? 0 : 1) as 0 | 1,
  }));
  const belief = [...state.belief]
    .sort((a, b) => a.rank - b.rank)
    .map((b) => ({ point: b.point, mean: b.mean, rank: b.rank }));
  const plotDim =
    state.dimension === 1 ? 1 : state.dimension === 2 ? 2 : 0;

  if (state.status !== "active" || state.step >= state.budget) {
    return {
      screen: "done",
      step: state.step,
      budget: state.budget,
      cards: [],
      history,
      belief,
      plotDim,
    };
  }
  if (!pending) {
    return {
      screen: "waiting",
      step: state.step,
      budget: state.budget,
      cards: [],
      history,
      belief,
      plotDim,
    };
  }
  return {
    screen: "duel",
    step: pending.step,
    budget: pending.budget,
    cards: [
      { title: "Option A", coords: pending.x1 },
      { title: "Option B", coords: pending.x2 },
    ],
    history,
    belief,
    plotDim,
  };
}

export function formatCoords(coords: number[]): string {
  return coords.map((v) => v.toFixed(4)).join(", ");
}

// Inline SVG plot of the proposed pair inside [-1, 1]^d (d = 1 or 2).
export function pairPlotSvg(
  x1: number[],
  x2: number[],
  dim: 1 | 2,
  size = 200,
): string {
  const toPx = (v: number) => ((v + 1) / 2) * (size - 20) + 10;
  const pt = (p: number[], cls: string, label: string) => {
    const cx = toPx(p[0]);
    const cy = dim === 2 ? size - toPx(p[1]) : size / 2;
    return (
      `<circle class="${cls}" cx="${cx.toFixed(1)}" cy="${cy.toFixed(1)}" r="6"></circle>` +
      `<text x="${(cx + 9).toFixed(1)}" y="${(cy + 4).toFixed(1)}">${label}</text>`
    );
  };
  const axis =
    dim === 1
      ? `<line x1="10" y1="${size / 2}" x2="${size - 10}" y2="${size / 2}" class="axis"></line>`
      : `<rect x="10" y="10" width="${size - 20}" height="${size - 20}" class="axis" fill="none"></rect>`;
  return (
    `<svg viewBox="0 0 ${size} ${size}" width="${size}" height="${size}" role="img">` +
    axis +
    pt(x1, "pt-a", "A") +
    pt(x2, "pt-b", "B") +
    `</svg>`
  );
}
