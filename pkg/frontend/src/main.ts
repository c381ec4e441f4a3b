import { App, defaultBaseUrl } from "./app.js";

const root = document.getElementById("app");
if (root) {
  const app = new App(root, defaultBaseUrl());
  const existing = window.location.hash.replace(/^#/, "");
  if (existing) {
    void app.resume(existing);
  } else {
    app.render();
  }
}
