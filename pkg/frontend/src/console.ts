// Operator console: wires the bridge client to the scene and exposes the
// human actions (merge requests, alignment nudges, pause/resume). Every
// action is a plain bridge message; there is no privileged channel.

import { BridgeClient, type SocketFactory } from "./bridge.js";
import { SceneState } from "./scene.js";
import type { AlignmentMsg } from "./types.js";

const STATIC_TOPICS: [string, string?][] = [
  ["/clock", "clock"],
  ["/tf", "tf"],
  ["/world/map", "map_grid"],
  ["/world/map_meta", "map_meta"],
  ["/world/alignment", "alignment"],
  ["/world/robots", "roster"],
];

export interface AlignmentNudge {
  rotation?: number;
  tx?: number;
  ty?: number;
  scale?: number; // multiplicative
}

export class OperatorConsole {
  readonly client: BridgeClient;
  readonly scene = new SceneState();
  private subscribedRobots = new Set<number>();
  private subscribedIms = new Set<number>();

  constructor(bridgeUrl: string, factory?: SocketFactory) {
    this.client = new BridgeClient(bridgeUrl, factory);
    this.client.onStatus((status, detail) => {
      this.scene.connection = status;
      if (detail) this.scene.statusBanner = detail;
      if (status === "connected") this.scene.statusBanner = "";
    });
    this.client.onFrame((frame) => {
      this.scene.applyFrame(frame);
      this.followRoster();
    });
  }

  start(): void {
    this.client.connect();
    for (const [topic, type] of STATIC_TOPICS) this.client.subscribe(topic, type);
    this.client.advertise("/world/alignment", "alignment");
  }

  stop(): void {
    this.client.close();
  }

  /** Subscribe per-robot and per-IM topics as the roster announces them. */
  private followRoster(): void {
    for (const id of this.scene.roster.keys()) {
      if (this.subscribedRobots.has(id)) continue;
      this.subscribedRobots.add(id);
      this.client.subscribe(`/robot_${id}/virtual_scan`, "scan");
      const kind = this.scene.roster.get(id)?.kind;
      if (kind === "emulated") {
        this.client.subscribe(`/robot_${id}/merged_scan`, "scan");
      }
    }
    for (const id of this.scene.ims.keys()) {
      if (this.subscribedIms.has(id)) continue;
      this.subscribedIms.add(id);
      this.client.subscribe(`/im/${id}/velocity`, "im_velocity");
      this.client.subscribe(`/im/${id}/grant`, "im_grant");
      this.client.advertise(`/im/${id}/request`, "im_request");
    }
  }

  /** Ask the target intersection manager to let a robot leave its queue. */
  sendMergeRequest(robotId: number, imId: number): void {
    if (!this.scene.roster.has(robotId)) {
      throw new Error(`unknown robot ${robotId}`);
    }
    const panel = this.scene.ims.get(imId);
    if (!panel) {
      throw new Error(`unknown intersection manager ${imId}`);
    }
    const glyph = this.scene.robotGlyphs().find((g) => g.id === robotId);
    if (!glyph) {
      throw new Error(`robot ${robotId} has no pose yet`);
    }
    const distance = Math.hypot(glyph.pose.x - panel.x, glyph.pose.y - panel.y);
    if (distance > panel.areaRadius) {
      throw new Error(`robot ${robotId} is outside the intersection ${imId} area`);
    }
    this.client.publish(`/im/${imId}/request`, {
      robot_id: robotId,
      velocity: 0.0,
      movement: "exit",
      pose: glyph.pose,
      stamp: this.scene.clock,
    });
    this.scene.markMergePending(robotId, imId);
  }

  /** Incremental alignment edit; rejects a non-positive resulting scale. */
  nudgeAlignment(delta: AlignmentNudge): AlignmentMsg {
    const current = this.scene.alignment;
    const next: AlignmentMsg = {
      rotation: current.rotation + (delta.rotation ?? 0),
      tx: current.tx + (delta.tx ?? 0),
      ty: current.ty + (delta.ty ?? 0),
      scale: current.scale * (delta.scale ?? 1),
    };
    if (!(next.scale > 0)) {
      throw new Error(`alignment scale must stay positive, got ${next.scale}`);
    }
    this.client.publish("/world/alignment", next);
    return next;
  }

  pause(): void {
    this.scene.paused = true;
  }

  resume(): void {
    this.scene.paused = false;
  }
}
