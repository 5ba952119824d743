/** Entry point: connect screen, then the sequential rating flow. */

import { AnnotationApi } from "./api.js";
import { AnnotationFlow } from "./session.js";
import { applyKey, renderApp } from "./ui.js";

const STORAGE_KEY = "annotation-ui.connection";

interface SavedConnection {
  baseUrl: string;
  annotator: string;
}

function loadSaved(): SavedConnection {
  try {
    const raw = window.localStorage.getItem(STORAGE_KEY);
    if (raw) return JSON.parse(raw) as SavedConnection;
  } catch {
    // storage unavailable; fall through to defaults
  }
  return { baseUrl: "http://127.0.0.1:8765", annotator: "" };
}

function save(connection: SavedConnection): void {
  try {
    window.localStorage.setItem(STORAGE_KEY, JSON.stringify(connection));
  } catch {
    // best-effort convenience only
  }
}

function renderConnect(
  root: HTMLElement,
  onConnect: (baseUrl: string, annotator: string) => Promise<string | null>,
): void {
  const saved = loadSaved();
  root.replaceChildren();

  const panel = document.createElement("section");
  panel.className = "connect";

  const title = document.createElement("h1");
  title.textContent = "Image rating";
  panel.append(title);

  const urlLabel = document.createElement("label");
  urlLabel.textContent = "Rating service URL";
  const urlInput = document.createElement("input");
  urlInput.type = "url";
  urlInput.value = saved.baseUrl;
  urlLabel.append(urlInput);
  panel.append(urlLabel);

  const tokenLabel = document.createElement("label");
  tokenLabel.textContent = "Annotator token";
  const tokenInput = document.createElement("input");
  tokenInput.type = "text";
  tokenInput.placeholder = "your annotator id";
  tokenInput.value = saved.annotator;
  tokenLabel.append(tokenInput);
  panel.append(tokenLabel);

  const error = document.createElement("p");
  error.className = "inline-error";
  error.hidden = true;
  panel.append(error);

  const button = document.createElement("button");
  button.type = "button";
  button.className = "submit";
  button.textContent = "Start rating";
  panel.append(button);

  const update = () => {
    button.disabled = tokenInput.value.trim() === "" || urlInput.value.trim() === "";
  };
  urlInput.addEventListener("input", update);
  tokenInput.addEventListener("input", update);
  update();

  button.addEventListener("click", async () => {
    button.disabled = true;
    error.hidden = true;
    const failure = await onConnect(urlInput.value.trim(), tokenInput.value.trim());
    if (failure) {
      error.textContent = failure;
      error.hidden = false;
      button.disabled = false;
    }
  });

  root.append(panel);
}

function startFlow(root: HTMLElement, baseUrl: string, annotator: string): void {
  const api = new AnnotationApi(baseUrl);
  const flow = new AnnotationFlow(api, annotator);
  flow.onChange(() => renderApp(root, flow, api));
  window.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement) return;
    applyKey(flow, event.key);
  });
  renderApp(root, flow, api);
  void flow.start();
}

function boot(): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  renderConnect(root, async (baseUrl, annotator) => {
    const api = new AnnotationApi(baseUrl);
    try {
      await api.health();
    } catch (err) {
      const detail = err instanceof Error ? err.message : String(err);
      return `Could not reach the rating service: ${detail}`;
    }
    save({ baseUrl, annotator });
    startFlow(root, baseUrl, annotator);
    return null;
  });
}

boot();
