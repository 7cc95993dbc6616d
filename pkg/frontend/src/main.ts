// Browser entry: canvas scene, IM panels, merge/alignment controls.
// Bridge URL comes from the `?bridge=` query parameter.

import { OperatorConsole } from "./console.js";
import { drawScene, renderMapImage } from "./render.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function main(): void {
  const params = new URLSearchParams(window.location.search);
  const bridge = params.get("bridge") ?? "ws://127.0.0.1:9090/";
  const console_ = new OperatorConsole(bridge);
  console_.start();

  const canvas = el<HTMLCanvasElement>("scene");
  const ctx = canvas.getContext("2d")!;
  const banner = el<HTMLDivElement>("banner");
  const clockLabel = el<HTMLSpanElement>("clock");
  const statusLabel = el<HTMLSpanElement>("status");
  const imPanel = el<HTMLDivElement>("im-panel");
  const robotSelect = el<HTMLSelectElement>("merge-robot");
  const imSelect = el<HTMLSelectElement>("merge-im");
  const feedback = el<HTMLSpanElement>("feedback");

  let mapBitmap: ImageBitmap | null = null;
  let mapVersion: object | null = null;

  async function refreshMapBitmap(): Promise<void> {
    const scene = console_.scene;
    if (scene.map && scene.map !== mapVersion) {
      mapVersion = scene.map;
      const image = renderMapImage(scene);
      if (image) mapBitmap = await createImageBitmap(image);
    }
  }

  function refreshSelectors(): void {
    const scene = console_.scene;
    if (robotSelect.options.length !== scene.roster.size) {
      robotSelect.innerHTML = "";
      for (const [id, info] of scene.roster) {
        const option = document.createElement("option");
        option.value = String(id);
        option.textContent = `robot ${id} (${info.kind})`;
        robotSelect.appendChild(option);
      }
    }
    if (imSelect.options.length !== scene.ims.size) {
      imSelect.innerHTML = "";
      for (const id of scene.ims.keys()) {
        const option = document.createElement("option");
        option.value = String(id);
        option.textContent = `IM ${id}`;
        imSelect.appendChild(option);
      }
    }
  }

  function refreshImPanel(): void {
    const lines: string[] = [];
    for (const im of console_.scene.ims.values()) {
      const states = [...im.mergeStates.entries()]
        .map(([rid, s]) => `robot ${rid}: ${s}`)
        .join(", ");
      const caps = [...im.lastVelocity.entries()]
        .map(([rid, v]) => `${rid}:${v.toFixed(3)}`)
        .join(" ");
      lines.push(
        `<b>IM ${im.id}</b> exits[${states || "none"}] velocities[${caps || "none"}]`,
      );
    }
    imPanel.innerHTML = lines.join("<br>");
  }

  el<HTMLButtonElement>("merge-send").onclick = () => {
    try {
      console_.sendMergeRequest(Number(robotSelect.value), Number(imSelect.value));
      feedback.textContent = "merge request sent";
    } catch (error) {
      feedback.textContent = String(error);
    }
  };
  const nudge = (delta: Parameters<OperatorConsole["nudgeAlignment"]>[0]) => () => {
    try {
      console_.nudgeAlignment(delta);
      feedback.textContent = "alignment nudged";
    } catch (error) {
      feedback.textContent = String(error);
    }
  };
  el<HTMLButtonElement>("nudge-left").onclick = nudge({ tx: -0.1 });
  el<HTMLButtonElement>("nudge-right").onclick = nudge({ tx: 0.1 });
  el<HTMLButtonElement>("nudge-up").onclick = nudge({ ty: 0.1 });
  el<HTMLButtonElement>("nudge-down").onclick = nudge({ ty: -0.1 });
  el<HTMLButtonElement>("nudge-ccw").onclick = nudge({ rotation: 0.02 });
  el<HTMLButtonElement>("nudge-cw").onclick = nudge({ rotation: -0.02 });
  el<HTMLButtonElement>("pause").onclick = () => {
    if (console_.scene.paused) {
      console_.resume();
      el<HTMLButtonElement>("pause").textContent = "pause view";
    } else {
      console_.pause();
      el<HTMLButtonElement>("pause").textContent = "resume view";
    }
  };

  function frame(): void {
    const scene = console_.scene;
    statusLabel.textContent = scene.connection;
    clockLabel.textContent = `t = ${scene.clock.toFixed(2)} s`;
    banner.textContent = scene.statusBanner;
    banner.style.display = scene.statusBanner ? "block" : "none";
    refreshSelectors();
    refreshImPanel();
    if (!scene.paused) {
      void refreshMapBitmap().then(() => {
        drawScene(ctx, scene, mapBitmap, canvas.width, canvas.height);
      });
    }
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

window.addEventListener("load", main);
