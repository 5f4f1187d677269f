import init, { rewrite, invert, similarity } from "./pkg/convinv_demo.js";

const $ = (id) => document.getElementById(id);

function guard(out, f) {
  out.classList.remove("err");
  try {
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function renderTrace(table, trace) {
  table.replaceChildren();
  const head = table.insertRow();
  for (const h of ["step", "best text", "cosine"]) {
    const th = document.createElement("th");
    th.textContent = h;
    head.appendChild(th);
  }
  for (const s of trace) {
    const row = table.insertRow();
    row.insertCell().textContent = s.step;
    row.insertCell().textContent = s.text;
    const c = row.insertCell();
    c.className = "num";
    c.textContent = s.score.toFixed(4);
  }
}

await init();

$("rw-run").onclick = () =>
  guard($("rw-out"), () => {
    $("rw-out").textContent = rewrite($("rw-history").value, $("rw-query").value);
  });

$("inv-run").onclick = () =>
  guard($("inv-out"), () => {
    const r = JSON.parse(invert($("inv-history").value, $("inv-query").value, $("inv-seeded").checked));
    $("inv-out").textContent = `seed: ${r.seed}\nresult: ${r.text}\ncosine to session: ${r.score.toFixed(4)}`;
    renderTrace($("inv-trace"), r.trace);
  });

$("sim-run").onclick = () =>
  guard($("sim-out"), () => {
    $("sim-out").textContent = similarity($("sim-a").value, $("sim-b").value).toFixed(4);
  });
