import init, { PyramidView, sigmaLadder, assignmentField } from "./pkg/mrvlad_web.js";

const $ = (id) => document.getElementById(id);
const showError = (e) => { $("error").textContent = e ? String(e) : ""; };

function sampleImage(size) {
  const c = document.createElement("canvas");
  c.width = c.height = size;
  const g = c.getContext("2d");
  g.fillStyle = "#8c947a";
  g.fillRect(0, 0, size, size);
  g.fillStyle = "#525257";
  g.fillRect(0, size * 0.4, size, size * 0.2);
  const colors = ["#d94a3d", "#3b7dd8", "#e8b730", "#4bb36b", "#9a62cf"];
  for (let i = 0; i < 14; i++) {
    g.fillStyle = colors[i % colors.length];
    const x = (i * 37) % size, y = (i * 61) % size, r = 6 + (i % 4) * 4;
    g.beginPath();
    if (i % 2) g.arc(x, y, r, 0, 2 * Math.PI); else g.rect(x - r, y - r, 2 * r, 2 * r);
    g.fill();
  }
  return g.getImageData(0, 0, size, size);
}

let source = null;

function drawPyramid() {
  if (!source) return;
  const out = $("levels");
  out.textContent = "";
  try {
    const mode = document.querySelector("input[name=mode]:checked").value;
    const bytes = new Uint8Array(source.data.buffer);
    const p = mode === "subsample"
      ? PyramidView.subsample(bytes, source.width, source.height,
          new Uint32Array($("factors").value.split(",").map(Number)))
      : PyramidView.gaussian(bytes, source.width, source.height,
          Number($("gfactor").value), Number($("gsigma").value), 16);
    const scale = 256 / source.width;
    for (let i = 0; i < p.levels(); i++) {
      const w = p.width(i), h = p.height(i);
      const c = document.createElement("canvas");
      c.width = w; c.height = h;
      c.style.width = `${w * scale}px`;
      c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(p.rgba(i)), w, h), 0, 0);
      const fig = document.createElement("figure");
      const cap = document.createElement("figcaption");
      const s = p.sigmaEff(i);
      cap.textContent = `×${p.factor(i).toFixed(3)}  ${w}×${h}` + (Number.isNaN(s) ? "" : `  σ_eff ${s.toFixed(3)}`);
      fig.append(c, cap);
      out.append(fig);
    }
    p.free();
    showError(null);
  } catch (e) { showError(e); }
}

function drawLadder() {
  const t = $("ladder");
  try {
    const vals = sigmaLadder(Number($("lfactor").value), Number($("lsigma").value), Number($("llevels").value));
    t.innerHTML = "<tr><th>level</th><th>σ_eff</th></tr>" +
      Array.from(vals, (v, i) => `<tr><td>${i + 1}</td><td>${v.toFixed(9)}</td></tr>`).join("");
    showError(null);
  } catch (e) { showError(e); }
}

const EXTENT = 2;
const centers = [[-1, -0.6], [1.1, -0.4], [0, 1.2], [-0.2, -0.1]];
let dragging = -1;

function drawField() {
  const c = $("field");
  const g = c.getContext("2d");
  const alpha = 10 ** Number($("alpha").value);
  $("alphaval").textContent = alpha.toFixed(2);
  const size = 160;
  const rgba = assignmentField(new Float64Array(centers.flat()), alpha, size, EXTENT);
  const tmp = document.createElement("canvas");
  tmp.width = tmp.height = size;
  tmp.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
  g.imageSmoothingEnabled = false;
  g.drawImage(tmp, 0, 0, c.width, c.height);
  g.strokeStyle = "#000";
  for (const [x, y] of centers) {
    const [px, py] = toCanvas(x, y);
    g.beginPath(); g.arc(px, py, 6, 0, 2 * Math.PI); g.stroke();
  }
}

function toCanvas(x, y) {
  const c = $("field");
  return [(x + EXTENT) / (2 * EXTENT) * c.width, (EXTENT - y) / (2 * EXTENT) * c.height];
}

function fromCanvas(ev) {
  const c = $("field"), r = c.getBoundingClientRect();
  const px = (ev.clientX - r.left) * c.width / r.width, py = (ev.clientY - r.top) * c.height / r.height;
  return [px / c.width * 2 * EXTENT - EXTENT, EXTENT - py / c.height * 2 * EXTENT];
}

async function main() {
  await init();
  source = sampleImage(128);
  $("file").addEventListener("change", async (ev) => {
    const f = ev.target.files[0];
    if (!f) return;
    const bmp = await createImageBitmap(f);
    const c = document.createElement("canvas");
    c.width = bmp.width; c.height = bmp.height;
    c.getContext("2d").drawImage(bmp, 0, 0);
    source = c.getContext("2d").getImageData(0, 0, bmp.width, bmp.height);
    drawPyramid();
  });
  for (const id of ["factors", "gfactor", "gsigma"]) $(id).addEventListener("input", drawPyramid);
  for (const r of document.querySelectorAll("input[name=mode]")) r.addEventListener("change", drawPyramid);
  for (const id of ["lfactor", "lsigma", "llevels"]) $(id).addEventListener("input", drawLadder);
  $("alpha").addEventListener("input", drawField);

  const field = $("field");
  field.addEventListener("pointerdown", (ev) => {
    const [x, y] = fromCanvas(ev);
    dragging = centers.findIndex(([cx, cy]) => Math.hypot(cx - x, cy - y) < 0.15);
  });
  field.addEventListener("pointermove", (ev) => {
    if (dragging < 0) return;
    centers[dragging] = fromCanvas(ev);
    drawField();
  });
  window.addEventListener("pointerup", () => { dragging = -1; });

  drawPyramid();
  drawLadder();
  drawField();
}

main().catch(showError);
