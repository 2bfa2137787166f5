import init, { Demo } from "./pkg/bvv_web.js";

const COLORS = ["#999999", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const $ = (id) => document.getElementById(id);

function call(json) {
  const v = JSON.parse(json);
  if (v && v.error) throw new Error(v.error);
  return v;
}

function drawPixels(canvas, width, height, values, scale) {
  canvas.width = width * scale;
  canvas.height = height * scale;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  values.forEach((v, i) => {
    const c = 255 - v;
    img.data.set([c, c, c, 255], i * 4);
  });
  const tmp = new OffscreenCanvas(width, height);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function render(demo) {
  const text = $("render-text").value;
  const side = Number($("render-side").value);
  try {
    const v = call(demo.render(text, side));
    const scale = Math.max(1, Math.floor(256 / side));
    drawPixels($("render-source"), v.source_width, v.source_height, v.source.map((b) => b * 255), 4);
    drawPixels($("render-gray"), side, side, v.gray, scale);
    drawPixels($("render-binary"), side, side, v.binary.map((b) => b * 255), scale);
    $("render-caption").textContent = `binarized, ink density ${v.density.toFixed(3)}`;
    $("status").textContent = "";
  } catch (e) {
    $("status").textContent = e.message;
  }
}

function segment(demo) {
  const out = $("tokens");
  out.replaceChildren();
  try {
    const v = call(demo.segment($("seg-text").value));
    for (const s of v.segments) {
      const span = document.createElement("span");
      span.className = s.kind;
      span.textContent = s.kind === "surrogate_escape" ? `\\u${s.id.toString(16)}` : s.text;
      span.title = `id 0x${s.id.toString(16).toUpperCase()} (${s.kind})`;
      out.appendChild(span);
    }
    $("seg-stats").textContent =
      `${v.segments.length} tokens, ${v.chars} characters, ${v.chars_per_token.toFixed(2)} characters per token`;
  } catch (e) {
    $("seg-stats").textContent = e.message;
  }
}

function project(demo) {
  const points = call(demo.projection());
  const canvas = $("proj");
  const ctx = canvas.getContext("2d");
  const xs = points.map((p) => p.x);
  const ys = points.map((p) => p.y);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const pad = 12;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad);
  const sy = (y) => canvas.height - pad - ((y - y0) / (y1 - y0 || 1)) * (canvas.height - 2 * pad);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const p of points) {
    ctx.fillStyle = COLORS[Math.min(p.len, COLORS.length - 1)];
    ctx.beginPath();
    ctx.arc(sx(p.x), sy(p.y), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  $("legend").innerHTML = COLORS.slice(1)
    .map((c, i) => `<span style="background:${c}">${i + 1}${i === COLORS.length - 2 ? "+" : ""}</span>`)
    .join("");
  const nearest = (ev) => {
    const r = canvas.getBoundingClientRect();
    const mx = ev.clientX - r.left;
    const my = ev.clientY - r.top;
    let best = null;
    let bestD = 64;
    for (const p of points) {
      const d = (sx(p.x) - mx) ** 2 + (sy(p.y) - my) ** 2;
      if (d < bestD) [best, bestD] = [p, d];
    }
    return best;
  };
  canvas.onmousemove = (ev) => {
    const p = nearest(ev);
    $("proj-hover").textContent = p ? `${JSON.stringify(p.text)} (id ${p.id}, length ${p.len})` : " ";
  };
  canvas.onclick = (ev) => {
    const p = nearest(ev);
    if (p && p.text) {
      $("render-text").value = p.text;
      render(demo);
    }
  };
}

await init();
const demo = new Demo();
$("status").textContent = "";
$("render-text").oninput = () => render(demo);
$("render-side").onchange = () => render(demo);
$("seg-text").oninput = () => segment(demo);
$("proj-run").onclick = () => {
  $("proj-run").disabled = true;
  $("proj-run").textContent = "Computing…";
  setTimeout(() => {
    try {
      project(demo);
      $("proj-run").textContent = "Projection ready";
    } catch (e) {
      $("status").textContent = e.message;
      $("proj-run").disabled = false;
    }
  }, 10);
};
render(demo);
segment(demo);
