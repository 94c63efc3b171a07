// Built bindings land in ./pkg (see the README for the wasm-bindgen command).
import init, { dropoutPreview, runSearch, aggregateMetrics } from "./pkg/toolplay_web.js";

const $ = (id) => document.getElementById(id);

const SAMPLE_REGISTRY = {
  tools: [{
    name: "get_weather",
    description: "Current weather for a city.",
    parameters: {
      properties: {
        city: { type: "string", description: "English city name, e.g. Paris" },
        units: { type: "string", description: "metric or imperial" },
        lang: { type: "string", description: "Language code for the summary text" },
        days: { type: "integer", description: "Forecast days, 0 for current only" },
      },
      required: ["city"],
    },
    executor: { kind: "rest", method: "GET", url: "http://localhost:8080/weather" },
  }],
};

const SAMPLE_ROWS = [
  ["Simple-Python", 96.0, 0.5],
  ["Simple-REST", 70.0, 0.5],
  ["Multiple", 96.0, 1],
  ["Parallel", 90.0, 1],
  ["Multiple-Parallel", 77.5, 1],
];

function fail(el, err) {
  el.className = "error";
  el.textContent = String(err.message ?? err);
}

function seedOf(id) {
  return BigInt(Math.max(0, Math.floor(Number($(id).value) || 0)));
}

function applyDropout() {
  const summary = $("drop-summary");
  summary.className = "";
  try {
    const report = JSON.parse(dropoutPreview($("registry").value, Number($("drop-p").value), seedOf("drop-seed")));
    summary.textContent = `dropped ${report.dropped} of ${report.described_before} parameter descriptions`;
    $("drop-out").textContent = JSON.stringify(report.registry, null, 2);
  } catch (err) {
    fail(summary, err);
    $("drop-out").textContent = "";
  }
}

function renderTree(report) {
  const beams = new Set(report.beams.flat());
  const children = new Map();
  for (const node of report.nodes) {
    const key = node.parent ?? "root";
    if (!children.has(key)) children.set(key, []);
    children.get(key).push(node);
  }
  const box = $("s-tree");
  box.replaceChildren();
  const walk = (key, indent) => {
    for (const node of children.get(key) ?? []) {
      const line = document.createElement("div");
      line.textContent = `${"  ".repeat(indent)}${node.label}  ${node.reward.toFixed(3)}`;
      if (node.id === report.best) line.className = "best";
      else if (beams.has(node.id)) line.className = "beam";
      box.append(line);
      walk(node.id, indent + 1);
    }
  };
  walk("root", 0);
}

function search() {
  const summary = $("s-summary");
  summary.className = "";
  try {
    const report = JSON.parse(runSearch(
      $("s-strategy").value,
      Number($("s-width").value),
      Number($("s-branching").value),
      Number($("s-depth").value),
      seedOf("s-seed"),
    ));
    summary.textContent = `best ${report.best_label} with reward ${report.best_reward}; `
      + `best by depth ${report.best_by_depth.join(" -> ")}; ${report.nodes.length} nodes evaluated`;
    renderTree(report);
  } catch (err) {
    fail(summary, err);
    $("s-tree").replaceChildren();
  }
}

function addRow([name, accuracy, weight] = ["", 0, 1]) {
  const row = document.createElement("tr");
  for (const [value, type] of [[name, "text"], [accuracy, "number"], [weight, "number"]]) {
    const cell = document.createElement("td");
    const input = document.createElement("input");
    input.type = type;
    input.value = value;
    if (type === "number") input.step = "any";
    cell.append(input);
    row.append(cell);
  }
  $("agg-table").tBodies[0].append(row);
}

function aggregate() {
  const out = $("agg-out");
  out.className = "";
  const rows = [...$("agg-table").tBodies[0].rows].map((row) => {
    const [name, accuracy, weight] = [...row.querySelectorAll("input")].map((i) => i.value);
    return { name, accuracy: Number(accuracy), weight: Number(weight) };
  });
  try {
    const report = JSON.parse(aggregateMetrics(JSON.stringify(rows)));
    out.textContent = `weighted ${report.weighted}, unweighted ${report.unweighted}`;
  } catch (err) {
    fail(out, err);
  }
}

await init();
$("registry").value = JSON.stringify(SAMPLE_REGISTRY, null, 2);
SAMPLE_ROWS.forEach(addRow);
$("drop-run").addEventListener("click", applyDropout);
$("s-run").addEventListener("click", search);
$("agg-add").addEventListener("click", () => addRow());
$("agg-run").addEventListener("click", aggregate);
applyDropout();
search();
aggregate();
