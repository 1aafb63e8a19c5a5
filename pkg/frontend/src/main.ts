import { ReviewApi } from "./api";
import { App } from "./app";

const params = new URLSearchParams(window.location.search);
const base = params.get("api") ?? "http://127.0.0.1:8765";
const actor = params.get("actor") ?? "anonymous";

const api = new ReviewApi(base, actor);
const app = new App(
  api,
  document.getElementById("queue")!,
  document.getElementById("detail")!,
);
app.bindKeyboard(document);
void app.loadQueue();

declare global {
  interface Window {
    reviewApp: App;
  }
}
window.reviewApp = app;
