import { ApiClient } from "./api.js";
import { App } from "./app.js";

// Served by `confloop serve --ui-dir`: the API lives at the same origin.
// An explicit base (e.g. a dev server on another port) can be provided via
// <meta name="confloop-api-base" content="http://127.0.0.1:8000">.
const meta = document.querySelector<HTMLMetaElement>('meta[name="confloop-api-base"]');
const base = meta?.content ?? "";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

new App(new ApiClient(base), root).start();
