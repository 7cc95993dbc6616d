// Scene state: everything rendered comes from received bridge messages.
// No client-side extrapolation; disconnecting simply freezes the last state.

import type {
  AlignmentMsg,
  BridgeFrame,
  ClockMsg,
  ConnectionStatus,
  ImGrantMsg,
  ImVelocityMsg,
  MapGridMsg,
  PoseMsg,
  RobotKind,
  RosterMsg,
  ScanMsg,
  TfMsg,
} from "./types.js";

export interface RobotGlyph {
  id: number;
  kind: RobotKind;
  pose: PoseMsg;
  radius: number;
  opacity: number; // doppelgangers render translucent
}

export type MergeState = "pending" | "granted" | "deferred";

export interface ImPanel {
  id: number;
  x: number;
  y: number;
  areaRadius: number;
  lastVelocity: Map<number, number>;
  mergeStates: Map<number, MergeState>;
}

const IDENTITY: AlignmentMsg = { rotation: 0, tx: 0, ty: 0, scale: 1 };

export function projectPose(pose: PoseMsg, alignment: AlignmentMsg): PoseMsg {
  const c = Math.cos(alignment.rotation);
  const s = Math.sin(alignment.rotation);
  return {
    x: alignment.scale * (c * pose.x - s * pose.y) + alignment.tx,
    y: alignment.scale * (s * pose.x + c * pose.y) + alignment.ty,
    theta: pose.theta + alignment.rotation,
  };
}

function robotIdFromFrame(child: string): number | null {
  const match = /^robot_(\d+)\/base$/.exec(child);
  return match ? Number(match[1]) : null;
}

function robotIdFromTopic(topic: string): number | null {
  const match = /^\/robot_(\d+)\//.exec(topic);
  return match ? Number(match[1]) : null;
}

export class SceneState {
  map: MapGridMsg | null = null;
  clock = 0;
  alignment: AlignmentMsg = IDENTITY;
  connection: ConnectionStatus = "connecting";
  statusBanner = "";
  paused = false;
  roster = new Map<number, { kind: RobotKind; radius: number }>();
  ims = new Map<number, ImPanel>();
  estimates = new Map<number, PoseMsg>(); // raw map->robot_i/base transforms
  scans = new Map<number, ScanMsg>();

  applyFrame(frame: BridgeFrame): void {
    if (frame.op === "status") {
      if (frame.level === "error") this.statusBanner = String(frame.msg ?? "bridge error");
      return;
    }
    if (frame.op !== "publish" || typeof frame.topic !== "string") return;
    const topic = frame.topic;
    const msg = frame.msg;
    if (topic === "/clock") {
      this.clock = (msg as ClockMsg).sim_time;
      return;
    }
    if (topic === "/world/alignment") {
      this.alignment = msg as AlignmentMsg;
      return;
    }
    if (topic === "/world/map") {
      this.map = msg as MapGridMsg;
      return;
    }
    if (topic === "/world/robots") {
      const roster = msg as RosterMsg;
      this.roster = new Map(roster.robots.map((r) => [r.id, { kind: r.kind, radius: r.radius }]));
      for (const im of roster.ims) {
        const existing = this.ims.get(im.id);
        this.ims.set(im.id, {
          id: im.id,
          x: im.x,
          y: im.y,
          areaRadius: im.area_radius,
          lastVelocity: existing?.lastVelocity ?? new Map(),
          mergeStates: existing?.mergeStates ?? new Map(),
        });
      }
      return;
    }
    if (topic === "/tf") {
      for (const t of (msg as TfMsg).transforms) {
        if (t.parent !== "map") continue;
        const id = robotIdFromFrame(t.child);
        if (id !== null) this.estimates.set(id, { x: t.x, y: t.y, theta: t.theta });
      }
      return;
    }
    const scanRobot = robotIdFromTopic(topic);
    if (scanRobot !== null && (topic.endsWith("/virtual_scan") || topic.endsWith("/merged_scan"))) {
      this.scans.set(scanRobot, msg as ScanMsg);
      return;
    }
    const imMatch = /^\/im\/(\d+)\/(velocity|grant)$/.exec(topic);
    if (imMatch) {
      const panel = this.ims.get(Number(imMatch[1]));
      if (!panel) return;
      if (imMatch[2] === "velocity") {
        const decision = msg as ImVelocityMsg;
        panel.lastVelocity.set(decision.robot_id, decision.velocity);
      } else {
        const grant = msg as ImGrantMsg;
        panel.mergeStates.set(grant.robot_id, grant.granted ? "granted" : "deferred");
      }
    }
  }

  markMergePending(robotId: number, imId: number): void {
    const panel = this.ims.get(imId);
    if (panel && !panel.mergeStates.has(robotId)) {
      panel.mergeStates.set(robotId, "pending");
    }
  }

  /** Glyphs for every robot a `/tf` pose has been received for. Virtual robot
   * transforms are already virtual-world poses; doppelgangers are the raw
   * localization estimates mapped through the current frame alignment. */
  robotGlyphs(): RobotGlyph[] {
    const glyphs: RobotGlyph[] = [];
    for (const [id, pose] of [...this.estimates.entries()].sort((a, b) => a[0] - b[0])) {
      const info = this.roster.get(id) ?? { kind: "virtual" as RobotKind, radius: 0.105 };
      const doppelganger = info.kind === "emulated";
      glyphs.push({
        id,
        kind: info.kind,
        pose: doppelganger ? projectPose(pose, this.alignment) : pose,
        radius: info.radius,
        opacity: doppelganger ? 0.5 : 1.0,
      });
    }
    return glyphs;
  }

  /** Latest scan of one robot as map-frame points, anchored at its glyph pose. */
  scanPoints(robotId: number): { x: number; y: number }[] {
    const scan = this.scans.get(robotId);
    const glyph = this.robotGlyphs().find((g) => g.id === robotId);
    if (!scan || !glyph) return [];
    const points: { x: number; y: number }[] = [];
    for (let i = 0; i < scan.ranges.length; i++) {
      const r = scan.ranges[i];
      if (r === null) continue;
      const bearing = scan.angle_min + i * scan.angle_increment;
      const angle = glyph.pose.theta + bearing;
      points.push({
        x: glyph.pose.x + r * Math.cos(angle),
        y: glyph.pose.y + r * Math.sin(angle),
      });
    }
    return points;
  }

  mergeState(robotId: number, imId: number): MergeState | null {
    return this.ims.get(imId)?.mergeStates.get(robotId) ?? null;
  }
}
