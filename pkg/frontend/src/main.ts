// Entry point: same-origin client, session id persisted in the URL hash so a
// reload restores the session from GET endpoints alone.

import { ServiceClient } from "./api.js";
import { mount } from "./dom.js";
import { ConsoleStore } from "./store.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app container");
}

const store = new ConsoleStore(new ServiceClient(""));
mount(root, store);

void store.loadCases().then(() => {
  const sessionId = location.hash.replace(/^#/, "");
  if (sessionId !== "") {
    void store.restore(sessionId);
  }
});
