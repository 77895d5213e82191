// Plain-JS driver for the wasm demo. Build the module with
//   wasm-pack build crates/demo --target web --out-dir www/pkg
// then serve crates/demo/www with any static file server.

import init, { render_section, simulate_bend, run_design, demo_version } from "./pkg/stretchbend_demo.js";

const $ = (id) => document.getElementById(id);
const controls = $("controls");
const views = $("views");
const status = $("status");

const state = {
  tab: "section",
  section: { type_id: 2, seed: 7 },
  bend: { a1: 800, b1: 0.20, a2: 760, b2: 0.15, length: 530, type_id: 2, seed: 7 },
  design: { a1: 820, b1: 0.18, a2: 760, b2: 0.22, length: 540, type_id: 3, seed: 5, alpha: 0.8, iters: 30 },
};

function slider(label, key, obj, min, max, step) {
  const value = obj[key];
  return `<label>${label}<output>${value}</output>
    <input type="range" data-key="${key}" min="${min}" max="${max}" step="${step}" value="${value}"></label>`;
}

function typeSelect(obj) {
  const opts = [1, 2, 3, 4, 5]
    .map((t) => `<option value="${t}" ${obj.type_id === t ? "selected" : ""}>type ${t}</option>`)
    .join("");
  return `<label>cross-section family<select data-key="type_id">${opts}</select></label>`;
}

const tabs = {
  section: {
    controls(s) {
      return typeSelect(s.section) + slider("parameter seed", "seed", s.section, 0, 99, 1);
    },
    model: (s) => s.section,
    run(s) {
      return JSON.parse(render_section(s.type_id, s.seed, 128, 64));
    },
    render(data) {
      views.innerHTML = `
        <div class="panel"><h2>Signed distance field (${data.sdf.h}×${data.sdf.w})</h2>
          <canvas id="cv-sdf" width="640" height="640"></canvas>
          <p class="caption">Blue inside (negative distance), red outside; white is the contour.
             Area ${data.area_mm2.toFixed(2)} mm², springback fraction η = ${data.eta.toFixed(4)}.</p></div>
        <div class="panel"><h2>Contour</h2><canvas id="cv-contour" width="640" height="420"></canvas>
          <p class="caption">${data.params.map((p) => `${p.name}=${p.value.toFixed(3)}`).join(", ")}</p></div>`;
      drawSdf($("cv-sdf"), data.sdf);
      drawPolys($("cv-contour"), [{ pts: data.contour.concat([data.contour[0]]), color: "#1c2430", width: 2 }]);
    },
  },
  bend: {
    controls(s) {
      const b = s.bend;
      return (
        slider("mold semi-axis a₁ (xy), mm", "a1", b, 700, 900, 1) +
        slider("rise ratio b₁/a₁", "b1", b, 0.02, 0.3, 0.005) +
        slider("mold semi-axis a₂ (xz), mm", "a2", b, 700, 900, 1) +
        slider("rise ratio b₂/a₂", "b2", b, 0.02, 0.3, 0.005) +
        slider("workpiece length, mm", "length", b, 505, 550, 1) +
        typeSelect(b) +
        slider("section seed", "seed", b, 0, 99, 1)
      );
    },
    model: (s) => s.bend,
    run(s) {
      return JSON.parse(simulate_bend(s.a1, s.b1, s.a2, s.b2, s.length, s.type_id, s.seed, 240));
    },
    render(data) {
      views.innerHTML = `
        <div class="panel"><h2>Top view (x–y)</h2><canvas id="cv-xy" width="900" height="340"></canvas>
          <p class="caption">Gray: mold · blue: workpiece at full load · red: after springback
            (η = ${data.eta.toFixed(4)}). Grip motion u = (${data.motion.slice(0, 3).map((v) => v.toFixed(1)).join(", ")}) mm,
            rotation |r| = ${Math.hypot(...data.motion.slice(3)).toFixed(4)} rad.</p></div>
        <div class="panel"><h2>Side view (x–z)</h2><canvas id="cv-xz" width="900" height="340"></canvas></div>`;
      const proj = (rows, ax, ay) => rows.map((r) => [r[ax], r[ay]]);
      for (const [id, ax, ay] of [["cv-xy", 0, 1], ["cv-xz", 0, 2]]) {
        drawPolys($(id), [
          { pts: proj(data.mold, ax, ay), color: "#9aa4b2", width: 2 },
          { pts: proj(data.loaded, ax, ay), color: "#2563eb", width: 2 },
          { pts: proj(data.final_line, ax, ay), color: "#dc2626", width: 2 },
        ]);
      }
    },
  },
  design: {
    controls(s) {
      const d = s.design;
      return (
        slider("target mold a₁, mm", "a1", d, 700, 900, 1) +
        slider("target rise b₁/a₁", "b1", d, 0.05, 0.3, 0.005) +
        slider("target mold a₂, mm", "a2", d, 700, 900, 1) +
        slider("target rise b₂/a₂", "b2", d, 0.05, 0.3, 0.005) +
        slider("workpiece length, mm", "length", d, 505, 550, 1) +
        typeSelect(d) +
        slider("section seed", "seed", d, 0, 99, 1) +
        slider("compensation step α", "alpha", d, 0.1, 1.0, 0.05) +
        slider("max iterations", "iters", d, 1, 60, 1)
      );
    },
    model: (s) => s.design,
    run(s) {
      return JSON.parse(run_design(s.a1, s.b1, s.a2, s.b2, s.length, s.type_id, s.seed, s.alpha, s.iters));
    },
    render(data) {
      const last = data.history[data.history.length - 1];
      views.innerHTML = `
        <div class="panel"><h2>Target vs designed mold (x–y)</h2>
          <canvas id="cv-design" width="900" height="360"></canvas>
          <p class="caption">Black: target final shape · gray: designed mold (over-bent to absorb springback)
            · red dashed: predicted final from the designed mold.
            ${data.converged ? "Converged" : "Stopped"} at MAD ${last.mad_mm.toFixed(3)} mm
            after ${last.iteration} iterations.</p></div>
        <div class="panel"><h2>Convergence</h2><canvas id="cv-hist" width="900" height="300"></canvas>
          <p class="caption">Mean (solid) and maximum (dotted) residual per iteration, log scale.</p></div>`;
      const proj = (rows) => rows.map((r) => [r[0], r[1]]);
      drawPolys($("cv-design"), [
        { pts: proj(data.target), color: "#1c2430", width: 2.5 },
        { pts: proj(data.mold), color: "#9aa4b2", width: 2 },
        { pts: proj(data.predicted), color: "#dc2626", width: 1.5, dash: [6, 4] },
      ]);
      drawHistory($("cv-hist"), data.history);
    },
  },
};

function bindControls() {
  const tab = tabs[state.tab];
  controls.innerHTML = tab.controls(state);
  controls.querySelectorAll("input[type=range]").forEach((el) => {
    el.addEventListener("input", () => {
      const model = tab.model(state);
      model[el.dataset.key] = parseFloat(el.value);
      el.closest("label").querySelector("output").textContent = el.value;
    });
  });
  controls.querySelectorAll("select").forEach((el) => {
    el.addEventListener("change", () => {
      tab.model(state)[el.dataset.key] = parseInt(el.value, 10);
    });
  });
}

function fit(ctx, pts2d, pad = 24) {
  let [minX, minY, maxX, maxY] = [Infinity, Infinity, -Infinity, -Infinity];
  for (const [x, y] of pts2d) {
    minX = Math.min(minX, x); maxX = Math.max(maxX, x);
    minY = Math.min(minY, y); maxY = Math.max(maxY, y);
  }
  const w = ctx.canvas.width - 2 * pad, h = ctx.canvas.height - 2 * pad;
  const sx = w / Math.max(maxX - minX, 1e-9), sy = h / Math.max(maxY - minY, 1e-9);
  const s = Math.min(sx, sy);
  return ([x, y]) => [pad + (x - minX) * s, ctx.canvas.height - pad - (y - minY) * s];
}

function drawPolys(canvas, polys) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = polys.flatMap((p) => p.pts);
  const t = fit(ctx, all);
  for (const { pts, color, width, dash } of polys) {
    ctx.strokeStyle = color;
    ctx.lineWidth = width;
    ctx.setLineDash(dash || []);
    ctx.beginPath();
    pts.forEach((p, i) => {
      const [x, y] = t(p);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
  ctx.setLineDash([]);
}

function drawSdf(canvas, sdf) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(sdf.w, sdf.h);
  const span = Math.max(Math.abs(sdf.min), Math.abs(sdf.max), 1e-9);
  for (let r = 0; r < sdf.h; r++) {
    for (let c = 0; c < sdf.w; c++) {
      const v = sdf.values[r * sdf.w + c] / span; // -1..1
      const i = ((sdf.h - 1 - r) * sdf.w + c) * 4;
      if (v < 0) { // inside: blue ramp
        img.data[i] = 255 + v * 200; img.data[i + 1] = 255 + v * 160; img.data[i + 2] = 255;
      } else { // outside: red ramp
        img.data[i] = 255; img.data[i + 1] = 255 - v * 160; img.data[i + 2] = 255 - v * 200;
      }
      img.data[i + 3] = 255;
    }
  }
  const off = new OffscreenCanvas(sdf.w, sdf.h);
  off.getContext("2d").putImageData(img, 0, 0);
  const ctx2 = canvas.getContext("2d");
  ctx2.imageSmoothingEnabled = false;
  ctx2.clearRect(0, 0, canvas.width, canvas.height);
  const s = Math.min(canvas.width / sdf.w, canvas.height / sdf.h);
  ctx2.drawImage(off, 0, 0, sdf.w * s, sdf.h * s);
}

function drawHistory(canvas, history) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 34;
  const xs = history.map((h) => h.iteration);
  const logs = history.flatMap((h) => [h.mad_mm, h.max_residual_mm]).map((v) => Math.log10(Math.max(v, 1e-4)));
  const [lo, hi] = [Math.min(...logs), Math.max(...logs, Math.min(...logs) + 1e-6)];
  const tx = (x) => pad + (x / Math.max(xs[xs.length - 1], 1)) * (canvas.width - 2 * pad);
  const ty = (v) => {
    const l = Math.log10(Math.max(v, 1e-4));
    return canvas.height - pad - ((l - lo) / (hi - lo)) * (canvas.height - 2 * pad);
  };
  ctx.strokeStyle = "#d7dde6";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  for (const [key, dash] of [["mad_mm", []], ["max_residual_mm", [3, 3]]]) {
    ctx.strokeStyle = "#2563eb";
    ctx.setLineDash(dash);
    ctx.beginPath();
    history.forEach((h, i) => {
      const x = tx(h.iteration), y = ty(h[key]);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
  ctx.setLineDash([]);
  ctx.fillStyle = "#6b7685";
  ctx.font = "12px system-ui";
  ctx.fillText(`${Math.pow(10, hi).toPrecision(2)} mm`, 4, pad + 4);
  ctx.fillText(`${Math.pow(10, lo).toPrecision(2)} mm`, 4, canvas.height - pad);
  ctx.fillText("iteration", canvas.width / 2 - 20, canvas.height - 8);
}

function runActive() {
  const tab = tabs[state.tab];
  const btn = $("run");
  btn.disabled = true;
  status.classList.remove("err");
  status.textContent = "computing…";
  // let the UI paint before the synchronous wasm call
  setTimeout(() => {
    try {
      const data = tab.run(tab.model(state));
      if (data.error) {
        status.classList.add("err");
        status.textContent = data.error;
      } else {
        tab.render(data);
        status.textContent = "done";
      }
    } catch (e) {
      status.classList.add("err");
      status.textContent = String(e);
    } finally {
      btn.disabled = false;
    }
  }, 16);
}

function selectTab(name) {
  state.tab = name;
  for (const t of ["section", "bend", "design"]) {
    $(`tab-${t}`).classList.toggle("active", t === name);
  }
  bindControls();
  runActive();
}

init().then(() => {
  status.textContent = demo_version();
  for (const t of ["section", "bend", "design"]) {
    $(`tab-${t}`).addEventListener("click", () => selectTab(t));
  }
  $("run").addEventListener("click", runActive);
  selectTab("section");
}).catch((e) => {
  status.classList.add("err");
  status.textContent = `failed to load wasm module: ${e}`;
});
