// Wire types for the bridge protocol (one JSON object per text frame).

export interface PoseMsg {
  x: number;
  y: number;
  theta: number;
}

export interface TransformMsg {
  parent: string;
  child: string;
  stamp: number;
  x: number;
  y: number;
  theta: number;
}

export interface TfMsg {
  transforms: TransformMsg[];
}

export interface ScanMsg {
  frame: string;
  stamp: number;
  angle_min: number;
  angle_max: number;
  angle_increment: number;
  range_min: number;
  range_max: number;
  ranges: (number | null)[];
}

export interface ClockMsg {
  sim_time: number;
}

export interface AlignmentMsg {
  rotation: number;
  tx: number;
  ty: number;
  scale: number;
}

export interface MapGridMsg {
  width: number;
  height: number;
  resolution: number;
  origin_x: number;
  origin_y: number;
  origin_theta: number;
  cells: number[]; // -1 unknown, 0 free, 1 occupied (row-major, y-up)
}

export type RobotKind = "virtual" | "emulated";

export interface RosterMsg {
  robots: { id: number; kind: RobotKind; radius: number }[];
  ims: { id: number; x: number; y: number; area_radius: number }[];
}

export interface ImRequestMsg {
  robot_id: number;
  velocity: number;
  movement: "exit" | "follow" | "enter";
  pose: PoseMsg;
  stamp: number;
}

export interface ImVelocityMsg {
  robot_id: number;
  velocity: number;
}

export interface ImGrantMsg {
  robot_id: number;
  granted: boolean;
  stamp: number;
}

export interface BridgeFrame {
  op: string;
  topic?: string;
  type?: string;
  msg?: unknown;
  id?: string;
  level?: string;
}

export type ConnectionStatus = "connecting" | "connected" | "reconnecting" | "closed";
