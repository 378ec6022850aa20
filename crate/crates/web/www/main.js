import init, { Demo } from "./pkg/sadl_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function draw(id, rgba, size) {
  const c = $(id);
  c.width = size;
  c.height = size;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  c.getContext("2d").putImageData(img, 0, 0);
}

function guard(f) {
  return () => {
    $("error").textContent = "";
    try {
      f();
    } catch (e) {
      $("error").textContent = String(e.message ?? e);
    }
  };
}

function newScene() {
  demo = new Demo(Number($("scene-seed").value) >>> 0, Number($("size").value));
  const s = demo.size();
  draw("scene0", demo.scene_rgba(0), s);
  draw("scene1", demo.scene_rgba(1), s);
  generate();
}

function generate() {
  demo.generate_views(Number($("view-seed").value) >>> 0);
  const s = demo.size();
  draw("view1", demo.view_rgba(1), s);
  draw("view2", demo.view_rgba(2), s);
  swap();
  sample();
}

function swap() {
  const e = Number($("erode").value);
  const b = Number($("blend").value);
  $("erode-v").textContent = e;
  $("blend-v").textContent = b;
  draw("view3", demo.view3_rgba(e, b), demo.size());
}

function sample() {
  const s = demo.size();
  const all = demo.sample_overlay(Number($("point-seed").value) >>> 0, Number($("n").value));
  const one = s * s * 4;
  ["ov0", "ov1", "ov2"].forEach((id, i) => draw(id, all.subarray(i * one, (i + 1) * one), s));
}

await init();
$("new-scene").onclick = guard(newScene);
$("gen").onclick = guard(generate);
$("sample").onclick = guard(sample);
$("erode").oninput = guard(swap);
$("blend").oninput = guard(swap);
guard(newScene)();
