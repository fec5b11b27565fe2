// Build first: wasm-pack build crates/web-demo --target web --out-dir www/pkg
import init, { spike_slice, cutoff_curve, FlowDemo } from "./pkg/ricci_lab_web.js";

const $ = (id) => document.getElementById(id);
const SIDE = 4.0;

// diverging map, blue negative, red positive, white at zero
function paint(canvas, values, n) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  let m = 0;
  for (const v of values) m = Math.max(m, Math.abs(v));
  m = m || 1;
  for (let k = 0; k < n * n; k++) {
    const s = values[k] / m;
    const r = s > 0 ? 255 : Math.round(255 * (1 + s));
    const b = s < 0 ? 255 : Math.round(255 * (1 - s));
    const g = Math.round(255 * (1 - Math.abs(s)));
    img.data.set([r, g, b, 255], 4 * k);
  }
  const tmp = new OffscreenCanvas(n, n);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function polyline(ctx, xs, ys, x0, x1, y0, y1, color) {
  const w = ctx.canvas.width, h = ctx.canvas.height;
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((x, i) => {
    const px = ((x - x0) / (x1 - x0 || 1)) * (w - 20) + 10;
    const py = h - 10 - ((ys[i] - y0) / (y1 - y0 || 1)) * (h - 20);
    i ? ctx.lineTo(px, py) : ctx.moveTo(px, py);
  });
  ctx.stroke();
}

function drawSlice() {
  const n = +$("slice-n").value;
  try {
    const r = spike_slice($("slice-kind").value, +$("slice-dim").value, n, SIDE, +$("slice-member").value);
    paint($("slice-canvas"), r, n);
    $("slice-info").textContent = `min R = ${Math.min(...r).toExponential(4)}\nmax R = ${Math.max(...r).toExponential(4)}`;
  } catch (e) {
    $("slice-info").textContent = String(e);
  }
}

let demo = null, running = false, history = [];

function resetFlow() {
  running = false;
  history = [];
  try {
    demo = new FlowDemo($("flow-kind").value, +$("flow-n").value, SIDE, +$("flow-member").value);
    showFlow();
  } catch (e) {
    demo = null;
    $("flow-info").textContent = String(e);
  }
}

function showFlow() {
  const n = +$("flow-n").value;
  paint($("flow-canvas"), demo.scalar(), n);
  history.push([demo.time(), demo.r_min()]);
  const ctx = $("flow-plot").getContext("2d");
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const ts = history.map((p) => p[0]), rs = history.map((p) => p[1]);
  polyline(ctx, ts, rs, ts[0], ts[ts.length - 1], Math.min(...rs), Math.max(0, ...rs), "#b00");
  $("flow-info").textContent =
    `t = ${demo.time().toExponential(3)}  steps = ${demo.steps()}\n` +
    `R_min = ${demo.r_min().toExponential(4)}  R_max = ${demo.r_max().toExponential(4)}\n` +
    `bilipschitz = ${demo.bilipschitz().toFixed(4)}`;
}

function tick() {
  if (!running || !demo) return;
  try {
    demo.step(5);
    showFlow();
    requestAnimationFrame(tick);
  } catch (e) {
    running = false;
    $("flow-info").textContent += "\n" + String(e);
  }
}

function drawCutoff() {
  const inner = +$("cut-inner").value;
  const c = cutoff_curve(inner, 1.0, 400);
  const s = [], v = [], d = [];
  for (let k = 0; k < c.length; k += 3) { s.push(c[k]); v.push(c[k + 1]); d.push(c[k + 2]); }
  const ctx = $("cut-canvas").getContext("2d");
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const lo = Math.min(...d);
  polyline(ctx, s, v, 0, s[s.length - 1], lo, 1, "#000");
  polyline(ctx, s, d, 0, s[s.length - 1], lo, 1, "#06c");
  $("cut-info").textContent = `inner = ${inner}\nmax |phi'| = ${(-lo).toFixed(4)}\nblack phi, blue phi'`;
}

await init();
$("slice-go").onclick = drawSlice;
$("flow-reset").onclick = resetFlow;
$("flow-run").onclick = () => { running = !running; if (running) tick(); };
$("cut-go").onclick = drawCutoff;
$("cut-inner").oninput = drawCutoff;
drawSlice();
resetFlow();
drawCutoff();
