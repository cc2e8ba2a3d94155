// Built with: wasm-pack build crates/wasm --target web --out-dir www/pkg
import init, { haze_map_rgba, lambda_schedule, complexity_table } from "./pkg/dptenet_wasm.js";

const $ = (id) => document.getElementById(id);
const MAX_SIDE = 640;

function show(el, msg, isError) {
  el.textContent = msg;
  el.className = isError ? "err" : "";
}

let source = null;

$("file").addEventListener("change", async (ev) => {
  const file = ev.target.files[0];
  if (!file) return;
  const bitmap = await createImageBitmap(file);
  // large photos are scaled down so the page stays responsive
  const scale = Math.min(1, MAX_SIDE / Math.max(bitmap.width, bitmap.height));
  const canvas = $("src");
  canvas.width = Math.round(bitmap.width * scale);
  canvas.height = Math.round(bitmap.height * scale);
  canvas.getContext("2d").drawImage(bitmap, 0, 0, canvas.width, canvas.height);
  source = canvas;
  show($("map-status"), `${canvas.width}x${canvas.height} loaded`);
});

function runMap() {
  if (!source) return show($("map-status"), "choose an image first", true);
  const { width, height } = source;
  const pixels = source.getContext("2d").getImageData(0, 0, width, height).data;
  try {
    const t0 = performance.now();
    const gray = haze_map_rgba(new Uint8Array(pixels.buffer), width, height, +$("patch").value, +$("radius").value);
    const out = $("map");
    out.width = width;
    out.height = height;
    out.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(gray), width, height), 0, 0);
    show($("map-status"), `done in ${(performance.now() - t0).toFixed(0)} ms`);
  } catch (e) {
    show($("map-status"), String(e), true);
  }
}

function runLambda() {
  const bars = $("bars");
  bars.replaceChildren();
  try {
    const values = lambda_schedule(+$("epochs").value, +$("delta").value);
    for (const [e, v] of values.entries()) {
      const bar = document.createElement("div");
      bar.style.height = `${v * 100}%`;
      bar.title = `epoch ${e}: ${v.toFixed(3)}`;
      bars.appendChild(bar);
    }
    const off = values.findIndex((v) => v === 0);
    show($("lambda-status"), off < 0 ? "hint term active in every epoch" : `hint term off from epoch ${off}`);
  } catch (e) {
    show($("lambda-status"), String(e), true);
  }
}

function runProfile() {
  try {
    $("table").textContent = complexity_table(
      +$("base").value, +$("levels").value, $("decoder").value, $("adaptation").value, +$("res").value);
    $("table").className = "";
  } catch (e) {
    show($("table"), String(e), true);
  }
}

await init();
$("run-map").addEventListener("click", runMap);
$("run-lambda").addEventListener("click", runLambda);
$("run-profile").addEventListener("click", runProfile);
runLambda();
runProfile();
