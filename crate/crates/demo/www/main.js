import init, { preference_curve, fit_synthetic, novelty_breakdown } from "./pkg/optiset_demo.js";

const $ = (id) => document.getElementById(id);
const coef = (id) => Math.pow(10, Number($(id).value));

function drawCurve() {
  const alpha = coef("alpha");
  const beta = coef("beta");
  $("alpha-v").textContent = alpha.toFixed(2);
  $("beta-v").textContent = beta.toFixed(2);
  const pts = preference_curve(alpha, beta, -5, 5, 401);
  const c = $("curve");
  const g = c.getContext("2d");
  const sx = (x) => ((x + 5) / 10) * c.width;
  const sy = (y) => ((1 - y) / 2) * c.height;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#bbb";
  g.beginPath();
  g.moveTo(0, sy(0)); g.lineTo(c.width, sy(0));
  g.moveTo(sx(0), 0); g.lineTo(sx(0), c.height);
  g.stroke();
  g.strokeStyle = "#1f5fbf";
  g.lineWidth = 2;
  for (const side of [-1, 1]) {
    g.beginPath();
    let first = true;
    for (let i = 0; i < pts.length; i += 2) {
      const x = pts[i];
      if ((side < 0 && x > 0) || (side > 0 && x <= 0)) continue;
      const px = sx(x), py = sy(pts[i + 1]);
      if (first) { g.moveTo(px, py); first = false; } else { g.lineTo(px, py); }
    }
    g.stroke();
  }
}

function runFit() {
  try {
    const f = fit_synthetic(
      Number($("fit-alpha").value), Number($("fit-beta").value),
      Number($("fit-n").value), BigInt($("fit-seed").value));
    $("fit-out").textContent =
      `fitted α = ${f.alpha.toFixed(4)}, β = ${f.beta.toFixed(4)}\n` +
      `KS objective ${f.objective.toFixed(4)} (at α = β = 1: ${f.objective_default.toFixed(4)})`;
    f.free();
  } catch (e) {
    $("fit-out").textContent = String(e);
  }
}

function runNovelty() {
  try {
    const r = JSON.parse(novelty_breakdown($("nov-in").value));
    const lines = r.gains.map((g, i) => `passage ${i + 1}: gain ${g.toFixed(4)}`);
    lines.push(`novelty ${r.novelty.toFixed(4)}`);
    $("nov-out").textContent = lines.join("\n");
  } catch (e) {
    $("nov-out").textContent = String(e);
  }
}

await init();
$("alpha").addEventListener("input", drawCurve);
$("beta").addEventListener("input", drawCurve);
$("fit-run").addEventListener("click", runFit);
$("nov-run").addEventListener("click", runNovelty);
drawCurve();
runFit();
runNovelty();
