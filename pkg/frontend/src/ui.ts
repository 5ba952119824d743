/** DOM rendering for the rating questionnaire.
 *
 * One item at a time, no routing, no going back.  The claimed feasibility
 * badge is always visible next to the image, because the rater's job is to
 * judge whether that claim holds.
 */

import { AnnotationApi } from "./api.js";
import { AnnotationFlow } from "./session.js";

export function formatProgress(progress: { rated: number; total: number }): string {
  return `${progress.rated} / ${progress.total}`;
}

export type KeyIntent =
  | { kind: "feasibility"; value: boolean }
  | { kind: "naturalness"; value: number }
  | { kind: "submit" }
  | null;

/** Keyboard shortcuts: y/n for the claim, 1-5 for naturalness, Enter submits. */
export function keyIntent(key: string): KeyIntent {
  if (key === "y" || key === "Y") return { kind: "feasibility", value: true };
  if (key === "n" || key === "N") return { kind: "feasibility", value: false };
  if (/^[1-5]$/.test(key)) return { kind: "naturalness", value: Number(key) };
  if (key === "Enter") return { kind: "submit" };
  return null;
}

export function applyKey(flow: AnnotationFlow, key: string): void {
  const intent = keyIntent(key);
  if (!intent) return;
  if (intent.kind === "feasibility") flow.setFeasibility(intent.value);
  else if (intent.kind === "naturalness") flow.setNaturalness(intent.value);
  else if (flow.canSubmit()) void flow.submit();
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function choiceButton(
  label: string,
  selected: boolean,
  onPick: () => void,
): HTMLButtonElement {
  const button = el("button", selected ? "choice selected" : "choice", label);
  button.type = "button";
  button.setAttribute("aria-pressed", String(selected));
  button.addEventListener("click", onPick);
  return button;
}

function renderBanner(flow: AnnotationFlow): HTMLElement | null {
  if (!flow.needsRetry) return null;
  const banner = el("div", "banner", "");
  banner.setAttribute("role", "alert");
  banner.dataset.testid = "retry-banner";
  banner.append(
    el("span", "", `Connection problem: ${flow.connectionError ?? "request failed"}. `),
  );
  const retry = el("button", "retry", "Retry");
  retry.type = "button";
  retry.addEventListener("click", () => void flow.retry());
  banner.append(retry);
  return banner;
}

function renderRating(
  flow: AnnotationFlow,
  api: AnnotationApi,
): HTMLElement {
  const item = flow.item;
  if (!item) return el("p", "", "No item.");
  const busy = flow.phase === "submitting";

  const card = el("section", "card");

  const media = el("figure", "media");
  const image = el("img");
  image.src = api.imageUrl(item.image_id);
  image.alt = item.prompt_text;
  media.append(image);
  card.append(media);

  const badges = el("div", "badges");
  badges.append(el("span", "badge category", item.category));
  const claim = el(
    "span",
    "badge claim",
    `claimed ${item.claimed_feasibility}`,
  );
  claim.dataset.testid = "claimed-feasibility";
  badges.append(claim);
  card.append(badges);

  card.append(el("p", "prompt", item.prompt_text));

  const form = el("div", "form");

  const feasibility = el("fieldset", "field");
  feasibility.disabled = busy;
  feasibility.append(el("legend", "", "Does the claimed feasibility hold? (y/n)"));
  feasibility.append(
    choiceButton("yes", flow.draft.feasibilityCorrect === true, () =>
      flow.setFeasibility(true),
    ),
    choiceButton("no", flow.draft.feasibilityCorrect === false, () =>
      flow.setFeasibility(false),
    ),
  );
  form.append(feasibility);

  const naturalness = el("fieldset", "field");
  naturalness.disabled = busy;
  naturalness.append(el("legend", "", "How natural does the image look? (1–5)"));
  for (let score = 1; score <= 5; score += 1) {
    naturalness.append(
      choiceButton(String(score), flow.draft.naturalness === score, () =>
        flow.setNaturalness(score),
      ),
    );
  }
  form.append(naturalness);

  if (flow.inlineError) {
    const error = el("p", "inline-error", flow.inlineError);
    error.setAttribute("role", "alert");
    error.dataset.testid = "inline-error";
    form.append(error);
  }

  const submit = el("button", "submit", busy ? "Submitting…" : "Submit (Enter)");
  submit.type = "button";
  submit.disabled = !flow.canSubmit();
  submit.dataset.testid = "submit";
  submit.addEventListener("click", () => void flow.submit());
  form.append(submit);

  card.append(form);
  return card;
}

/** Re-render the whole app for the flow's current state. */
export function renderApp(
  root: HTMLElement,
  flow: AnnotationFlow,
  api: AnnotationApi,
): void {
  root.replaceChildren();

  const header = el("header", "top");
  header.append(el("h1", "", "Image rating"));
  const progress = el("span", "progress", formatProgress(flow.progress));
  progress.dataset.testid = "progress";
  header.append(progress);
  root.append(header);

  const banner = renderBanner(flow);
  if (banner) root.append(banner);

  if (flow.phase === "loading" || flow.phase === "idle") {
    root.append(el("p", "status", "Loading…"));
  } else if (flow.phase === "done") {
    const done = el("section", "done");
    done.dataset.testid = "done";
    done.append(el("h2", "", "All items rated"));
    done.append(
      el("p", "", `You rated ${flow.progress.rated} of ${flow.progress.total} items. Thank you.`),
    );
    root.append(done);
  } else {
    root.append(renderRating(flow, api));
  }
}
