import init, { Demo, receptive_field } from "./pkg/demo.js";

const SIZE = 128;
const $ = (id) => document.getElementById(id);

function paint(canvas, side, rgba) {
  canvas.width = side;
  canvas.height = side;
  const image = new ImageData(new Uint8ClampedArray(rgba), side, side);
  canvas.getContext("2d").putImageData(image, 0, 0);
}

function showBlend(demo) {
  const w = Number($("weight").value);
  $("weight-value").textContent = w.toFixed(2);
  paint($("blend"), SIZE, demo.blend_rgba(w));
  const [p, s] = demo.blend_scores(w);
  $("blend-caption").textContent = `blend: PSNR ${p.toFixed(2)} dB, SSIM ${s.toFixed(3)}`;
}

function showDose(demo) {
  const dose = Number($("dose").value);
  $("dose-value").textContent = dose.toFixed(2);
  demo.simulate(dose, Number($("seed").value) >>> 0);
  paint($("ndct"), SIZE, demo.ndct_rgba());
  paint($("ldct"), SIZE, demo.ldct_rgba());
  $("ldct-caption").textContent = `low dose: PSNR ${demo.ldct_psnr().toFixed(2)} dB`;
  showBlend(demo);
}

function showFootprint() {
  const fp = receptive_field($("network").value);
  paint($("footprint"), fp.side(), fp.rgba());
  $("footprint-caption").textContent =
    `${fp.side()}x${fp.side()} receptive field, ${fp.total_params().toLocaleString()} parameters ` +
    `(${fp.trainable_params().toLocaleString()} trainable)`;
  fp.free();
}

await init();
const demo = new Demo(SIZE, Number($("dose").value), 1);
$("dose").addEventListener("change", () => showDose(demo));
$("seed").addEventListener("change", () => showDose(demo));
$("weight").addEventListener("input", () => showBlend(demo));
$("network").addEventListener("change", showFootprint);
showDose(demo);
showFootprint();
