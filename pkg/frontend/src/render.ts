// Canvas rendering split in two: a pure display-list builder (testable
// headless) and a painter that draws the list onto a 2D context.

import type { SceneState, RobotGlyph } from "./scene.js";

export interface Viewport {
  scale: number; // pixels per meter
  offsetX: number; // world origin in canvas pixels
  offsetY: number;
  height: number; // canvas height for the y flip
}

export type DisplayItem =
  | { kind: "map"; widthPx: number; heightPx: number }
  | { kind: "robot"; glyph: RobotGlyph; xPx: number; yPx: number; radiusPx: number; headingPx: [number, number] }
  | { kind: "scan"; robotId: number; points: [number, number][] }
  | { kind: "im"; id: number; xPx: number; yPx: number; radiusPx: number };

export function fitViewport(scene: SceneState, widthPx: number, heightPx: number): Viewport {
  const map = scene.map;
  if (!map) {
    return { scale: 100, offsetX: widthPx / 2, offsetY: heightPx / 2, height: heightPx };
  }
  const worldW = map.width * map.resolution;
  const worldH = map.height * map.resolution;
  const scale = Math.min(widthPx / worldW, heightPx / worldH);
  return {
    scale,
    offsetX: -map.origin_x * scale,
    offsetY: -map.origin_y * scale,
    height: heightPx,
  };
}

export function toCanvas(v: Viewport, x: number, y: number): [number, number] {
  return [x * v.scale + v.offsetX, v.height - (y * v.scale + v.offsetY)];
}

export function buildDisplayList(scene: SceneState, v: Viewport): DisplayItem[] {
  const items: DisplayItem[] = [];
  if (scene.map) {
    items.push({
      kind: "map",
      widthPx: scene.map.width * scene.map.resolution * v.scale,
      heightPx: scene.map.height * scene.map.resolution * v.scale,
    });
  }
  for (const glyph of scene.robotGlyphs()) {
    const [xPx, yPx] = toCanvas(v, glyph.pose.x, glyph.pose.y);
    const tip = toCanvas(
      v,
      glyph.pose.x + glyph.radius * 1.6 * Math.cos(glyph.pose.theta),
      glyph.pose.y + glyph.radius * 1.6 * Math.sin(glyph.pose.theta),
    );
    items.push({
      kind: "robot",
      glyph,
      xPx,
      yPx,
      radiusPx: glyph.radius * v.scale,
      headingPx: tip,
    });
    const points = scene
      .scanPoints(glyph.id)
      .map((p) => toCanvas(v, p.x, p.y)) as [number, number][];
    if (points.length) items.push({ kind: "scan", robotId: glyph.id, points });
  }
  for (const im of scene.ims.values()) {
    const [xPx, yPx] = toCanvas(v, im.x, im.y);
    items.push({ kind: "im", id: im.id, xPx, yPx, radiusPx: im.areaRadius * v.scale });
  }
  return items;
}

const KIND_COLOR: Record<string, string> = { virtual: "#1f6feb", emulated: "#d93f0b" };

export function renderMapImage(scene: SceneState): ImageData | null {
  const map = scene.map;
  if (!map || typeof ImageData === "undefined") return null;
  const img = new ImageData(map.width, map.height);
  for (let row = 0; row < map.height; row++) {
    for (let col = 0; col < map.width; col++) {
      const cls = map.cells[row * map.width + col];
      // Canvas rows run top-down while grid rows run bottom-up.
      const p = ((map.height - 1 - row) * map.width + col) * 4;
      const shade = cls === 1 ? 40 : cls === 0 ? 245 : 180;
      img.data[p] = shade;
      img.data[p + 1] = shade;
      img.data[p + 2] = shade;
      img.data[p + 3] = 255;
    }
  }
  return img;
}

export function drawScene(
  ctx: CanvasRenderingContext2D,
  scene: SceneState,
  mapBitmap: CanvasImageSource | null,
  widthPx: number,
  heightPx: number,
): void {
  const v = fitViewport(scene, widthPx, heightPx);
  ctx.clearRect(0, 0, widthPx, heightPx);
  ctx.fillStyle = "#ffffff";
  ctx.fillRect(0, 0, widthPx, heightPx);
  for (const item of buildDisplayList(scene, v)) {
    if (item.kind === "map" && mapBitmap) {
      ctx.imageSmoothingEnabled = false;
      const [left, top] = toCanvas(v, scene.map!.origin_x, scene.map!.origin_y + scene.map!.height * scene.map!.resolution);
      ctx.drawImage(mapBitmap, left, top, item.widthPx, item.heightPx);
    } else if (item.kind === "scan") {
      ctx.fillStyle = "rgba(46, 160, 67, 0.5)";
      for (const [x, y] of item.points) ctx.fillRect(x - 1, y - 1, 2, 2);
    } else if (item.kind === "robot") {
      ctx.globalAlpha = item.glyph.opacity;
      ctx.fillStyle = KIND_COLOR[item.glyph.kind] ?? "#444444";
      ctx.beginPath();
      ctx.arc(item.xPx, item.yPx, Math.max(item.radiusPx, 3), 0, 2 * Math.PI);
      ctx.fill();
      ctx.strokeStyle = ctx.fillStyle;
      ctx.lineWidth = 2;
      ctx.beginPath();
      ctx.moveTo(item.xPx, item.yPx);
      ctx.lineTo(item.headingPx[0], item.headingPx[1]);
      ctx.stroke();
      ctx.globalAlpha = 1.0;
      ctx.fillStyle = "#24292f";
      ctx.font = "11px sans-serif";
      ctx.fillText(String(item.glyph.id), item.xPx + item.radiusPx + 3, item.yPx - 3);
    } else if (item.kind === "im") {
      ctx.strokeStyle = "rgba(130, 80, 223, 0.6)";
      ctx.setLineDash([6, 6]);
      ctx.beginPath();
      ctx.arc(item.xPx, item.yPx, item.radiusPx, 0, 2 * Math.PI);
      ctx.stroke();
      ctx.setLineDash([]);
    }
  }
}
