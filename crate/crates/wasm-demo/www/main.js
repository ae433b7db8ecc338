import init, { scatter, thresholdComparison, robustComparison } from "./pkg/ssa_wasm_demo.js";

const GROUP_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
const num = (id) => Number(document.getElementById(id).value);
const status = document.getElementById("status");

function run(fn) {
  status.textContent = "working…";
  // let the status paint before the synchronous wasm call
  setTimeout(() => {
    try {
      fn();
      status.textContent = "";
    } catch (e) {
      status.textContent = String(e);
    }
  }, 10);
}

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

function line(ctx, xs, ys, color, opts = {}) {
  ctx.strokeStyle = color;
  ctx.globalAlpha = opts.alpha ?? 1;
  ctx.setLineDash(opts.dash ?? []);
  ctx.lineWidth = opts.width ?? 2;
  ctx.beginPath();
  xs.forEach((x, i) => (i === 0 ? ctx.moveTo(x, ys[i]) : ctx.lineTo(x, ys[i])));
  ctx.stroke();
  ctx.globalAlpha = 1;
  ctx.setLineDash([]);
  ctx.lineWidth = 1;
}

function label(ctx, text, x, y, color = "#222") {
  ctx.fillStyle = color;
  ctx.fillText(text, x, y);
}

function drawScatter() {
  const pts = JSON.parse(scatter(num("s-p"), num("s-n"), num("s-seed")));
  const c = document.getElementById("s-canvas");
  const ctx = c.getContext("2d");
  const pad = 30;
  axes(ctx, c.width, c.height, pad);
  const ext = (k) => [Math.min(...pts.map((p) => p[k])), Math.max(...pts.map((p) => p[k]))];
  const [x0, x1] = ext("core");
  const [y0, y1] = ext("spurious");
  const sx = (v) => pad + ((v - x0) / (x1 - x0)) * (c.width - 2 * pad);
  const sy = (v) => c.height - pad - ((v - y0) / (y1 - y0)) * (c.height - 2 * pad);
  for (const p of pts) {
    ctx.fillStyle = GROUP_COLORS[p.y * 2 + p.a];
    ctx.fillRect(sx(p.core) - 1.5, sy(p.spurious) - 1.5, 3, 3);
  }
  label(ctx, "core", c.width / 2, c.height - 8);
  label(ctx, "spurious", 4, pad - 10);
  const counts = [0, 0, 0, 0];
  pts.forEach((p) => counts[p.y * 2 + p.a]++);
  document.getElementById("s-legend").innerHTML = counts
    .map((n, i) => `<span><i class="swatch" style="background:${GROUP_COLORS[i]}"></i>(${i >> 1},${i & 1}) ${n}</span>`)
    .join("");
}

function drawThresholds() {
  const r = JSON.parse(thresholdComparison(num("t-p"), num("t-tau"), num("t-iters"), num("t-seed")));
  const c = document.getElementById("t-canvas");
  const ctx = c.getContext("2d");
  const pad = 40;
  axes(ctx, c.width, c.height, pad);
  const all = r.adaptive.concat(r.fixed);
  const maxIt = Math.max(1, ...all.map((t) => t.iteration));
  const maxShare = Math.max(r.true_minority_share * 1.5, ...all.map((t) => t.minority_share), 1e-3);
  const sx = (v) => pad + (v / maxIt) * (c.width - 2 * pad);
  const sy = (v) => c.height - pad - (v / maxShare) * (c.height - 2 * pad);
  const series = [
    ["adaptive", r.adaptive, "#1f77b4"],
    ["fixed", r.fixed, "#d62728"],
  ];
  series.forEach(([name, trace, color], i) => {
    line(ctx, trace.map((t) => sx(t.iteration)), trace.map((t) => sy(t.minority_share)), color);
    label(ctx, name, c.width - pad - 80, pad + 14 * i, color);
  });
  line(ctx, [sx(0), sx(maxIt)], [sy(r.true_minority_share), sy(r.true_minority_share)], "#555", { dash: [5, 4], width: 1 });
  const g = r.minority_group;
  label(ctx, `group (${g.y},${g.a}) share; true ${(100 * r.true_minority_share).toFixed(2)}%`, pad + 6, pad - 10);
  label(ctx, "iteration", c.width / 2, c.height - 10);
  label(ctx, (100 * maxShare).toFixed(1) + "%", 2, pad + 4);
  const final = (trace) => {
    const last = trace[trace.length - 1];
    if (!last) return "no recomputation";
    return r.groups.map((grp, i) => `(${grp.y},${grp.a}) ${last.admitted[i]}`).join(", ") + `; budget ${last.budget}`;
  };
  document.getElementById("t-final").textContent =
    `admitted at the end. adaptive: ${final(r.adaptive)}. fixed: ${final(r.fixed)}.`;
}

function drawRobust() {
  const r = JSON.parse(robustComparison(num("r-p"), num("r-epochs"), num("r-eta"), num("r-seed")));
  const c = document.getElementById("r-canvas");
  const ctx = c.getContext("2d");
  const pad = 40;
  axes(ctx, c.width, c.height, pad);
  const n = r.erm.average.length;
  const sx = (i) => pad + (i / Math.max(1, n - 1)) * (c.width - 2 * pad);
  const sy = (v) => c.height - pad - v * (c.height - 2 * pad);
  const idx = [...Array(n).keys()];
  const series = [
    ["ERM", r.erm, "#d62728"],
    ["Group DRO", r.dro, "#1f77b4"],
  ];
  series.forEach(([name, curve, color], i) => {
    line(ctx, idx.map(sx), curve.average.map(sy), color, { alpha: 0.35 });
    line(ctx, idx.map(sx), curve.worst_group.map(sy), color);
    const last = curve.worst_group[n - 1];
    label(ctx, `${name}: worst ${(100 * last).toFixed(1)}%`, c.width - pad - 170, pad + 14 * i, color);
  });
  label(ctx, "epoch", c.width / 2, c.height - 10);
  label(ctx, "100%", 4, pad + 4);
  label(ctx, "0%", 10, c.height - pad);
}

await init();
status.textContent = "";
document.getElementById("s-run").onclick = () => run(drawScatter);
document.getElementById("t-run").onclick = () => run(drawThresholds);
document.getElementById("r-run").onclick = () => run(drawRobust);
run(drawScatter);
