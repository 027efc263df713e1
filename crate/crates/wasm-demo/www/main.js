import init, { heatmaps, rankCurve, tradeoff } from "./pkg/xkv_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = { key: "#c0392b", value: "#2471a3", single_svd: "#7f8c8d", xkv2: "#e67e22", xkv4: "#27ae60" };

function params() {
  return [Number($("alignment").value), Number($("noise").value), Number($("seed").value) >>> 0];
}

function guarded(fn) {
  try {
    $("status").textContent = "";
    fn();
  } catch (e) {
    $("status").textContent = String(e.message ?? e);
  }
}

function drawHeatmap(canvas, m) {
  const ctx = canvas.getContext("2d");
  const n = m.length;
  const pad = 20;
  const cell = (canvas.width - pad) / n;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "10px sans-serif";
  for (let i = 0; i < n; i++) {
    ctx.fillStyle = "#444";
    ctx.fillText(i, 6, pad + (i + 0.6) * cell);
    ctx.fillText(i, pad + (i + 0.4) * cell, 12);
    for (let j = 0; j < n; j++) {
      const v = Math.max(0, Math.min(1, m[i][j]));
      ctx.fillStyle = `rgb(${Math.round(255 * v)}, ${Math.round(90 + 80 * (1 - Math.abs(2 * v - 1)))}, ${Math.round(255 * (1 - v))})`;
      ctx.fillRect(pad + j * cell, pad + i * cell, cell - 1, cell - 1);
      ctx.fillStyle = v > 0.5 ? "#fff" : "#000";
      ctx.fillText(m[i][j].toFixed(2), pad + j * cell + 3, pad + (i + 0.6) * cell);
    }
  }
}

function axes(ctx, w, h, m, xTicks, yLabel) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(m, 10);
  ctx.lineTo(m, h - m);
  ctx.lineTo(w - 10, h - m);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  for (const [x, label] of xTicks) ctx.fillText(label, x - 6, h - m + 16);
  ctx.fillText(yLabel, 4, 12);
}

function drawLines(ctx, series, xmap, ymap) {
  for (const { color, pts, label } of series) {
    ctx.strokeStyle = ctx.fillStyle = color;
    ctx.beginPath();
    pts.forEach(([x, y], i) => (i ? ctx.lineTo(xmap(x), ymap(y)) : ctx.moveTo(xmap(x), ymap(y))));
    ctx.stroke();
    for (const [x, y] of pts) ctx.fillRect(xmap(x) - 2, ymap(y) - 2, 4, 4);
    const [lx, ly] = pts[pts.length - 1];
    ctx.fillText(label, xmap(lx) + 6, ymap(ly));
  }
}

function updateHeatmaps() {
  guarded(() => {
    const r = JSON.parse(heatmaps(...params(), $("side").value));
    drawHeatmap($("cka"), r.cka);
    drawHeatmap($("cosine"), r.cosine);
  });
}

function updateCurve() {
  guarded(() => {
    const c = JSON.parse(rankCurve(...params(), Number($("energy").value)));
    const canvas = $("curve");
    const ctx = canvas.getContext("2d");
    const [w, h, m] = [canvas.width, canvas.height, 36];
    const xmap = (i) => m + 30 + i * ((w - 2 * m - 40) / (c.group_sizes.length - 1));
    const ymax = Math.max(...c.key_ratio, ...c.value_ratio) * 1.1;
    const ymap = (y) => h - m - (y / ymax) * (h - m - 20);
    axes(ctx, w, h, m, c.group_sizes.map((g, i) => [xmap(i), `G=${g}`]), "rank / width");
    ctx.fillText(`${(ymax / 1.1 * 100).toFixed(1)}%`, 4, ymap(ymax / 1.1));
    drawLines(ctx, [
      { color: COLORS.key, label: "keys", pts: c.key_ratio.map((y, i) => [i, y]) },
      { color: COLORS.value, label: "values", pts: c.value_ratio.map((y, i) => [i, y]) },
    ], xmap, ymap);
  });
}

function updateTradeoff() {
  guarded(() => {
    const pts = JSON.parse(tradeoff(...params()));
    const canvas = $("tradeoff");
    const ctx = canvas.getContext("2d");
    const [w, h, m] = [canvas.width, canvas.height, 40];
    const rates = pts.map((p) => p.rate);
    const errs = pts.map((p) => Math.max(p.attn_err, 1e-6));
    const [x0, x1] = [Math.min(...rates), Math.max(...rates)];
    const [y0, y1] = [Math.log10(Math.min(...errs)), Math.log10(Math.max(...errs))];
    const xmap = (x) => m + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * m - 50);
    const ymap = (y) => h - m - ((Math.log10(Math.max(y, 1e-6)) - y0) / (y1 - y0 || 1)) * (h - m - 20);
    const ticks = [...new Set(pts.map((p) => p.target))].map((t) => [xmap(t), `${t}x`]);
    axes(ctx, w, h, m, ticks, "attention rel. error (log)");
    const series = [
      ["single_svd", 1, COLORS.single_svd, "single"],
      ["xkv", 2, COLORS.xkv2, "xkv G=2"],
      ["xkv", 4, COLORS.xkv4, "xkv G=4"],
    ].map(([method, g, color, label]) => ({
      color,
      label,
      pts: pts.filter((p) => p.method === method && p.group_size === g).map((p) => [p.rate, p.attn_err]),
    })).filter((s) => s.pts.length);
    drawLines(ctx, series, xmap, ymap);
  });
}

function syncOutputs() {
  for (const o of document.querySelectorAll("output")) o.textContent = $(o.htmlFor.value).value;
}

await init();
for (const id of ["alignment", "noise", "seed"]) {
  $(id).addEventListener("input", () => {
    syncOutputs();
    updateHeatmaps();
    updateCurve();
  });
}
$("side").addEventListener("change", updateHeatmaps);
$("energy").addEventListener("input", () => {
  syncOutputs();
  updateCurve();
});
$("run-tradeoff").addEventListener("click", updateTradeoff);
syncOutputs();
updateHeatmaps();
updateCurve();
updateTradeoff();
