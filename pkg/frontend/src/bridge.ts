// Minimal bridge client: subscriptions, publishing, reconnect with backoff.
// The socket constructor is injectable so tests (and node) can supply one.

import type { BridgeFrame, ConnectionStatus } from "./types.js";

export interface SocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

const defaultFactory: SocketFactory = (url) => new WebSocket(url) as unknown as SocketLike;

export class BridgeClient {
  private socket: SocketLike | null = null;
  private subscriptions = new Map<string, string | undefined>();
  private advertisements = new Map<string, string>();
  private frameHandlers: ((frame: BridgeFrame) => void)[] = [];
  private statusHandlers: ((status: ConnectionStatus, detail?: string) => void)[] = [];
  private closed = false;
  private retries = 0;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  status: ConnectionStatus = "connecting";

  constructor(
    readonly url: string,
    private readonly factory: SocketFactory = defaultFactory,
    private readonly reconnectBaseMs = 500,
    private readonly reconnectMaxMs = 8000,
  ) {}

  onFrame(handler: (frame: BridgeFrame) => void): void {
    this.frameHandlers.push(handler);
  }

  onStatus(handler: (status: ConnectionStatus, detail?: string) => void): void {
    this.statusHandlers.push(handler);
  }

  private setStatus(status: ConnectionStatus, detail?: string): void {
    this.status = status;
    for (const handler of this.statusHandlers) handler(status, detail);
  }

  connect(): void {
    if (this.closed) return;
    this.setStatus(this.retries === 0 ? "connecting" : "reconnecting");
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      this.retries = 0;
      // Replay the session so latched topics restore the scene.
      for (const [topic, type] of this.advertisements) {
        socket.send(JSON.stringify({ op: "advertise", topic, type }));
      }
      for (const [topic, type] of this.subscriptions) {
        const frame: BridgeFrame = { op: "subscribe", topic };
        if (type) frame.type = type;
        socket.send(JSON.stringify(frame));
      }
      this.setStatus("connected");
    };
    socket.onmessage = (ev) => {
      let frame: BridgeFrame;
      try {
        frame = JSON.parse(String(ev.data));
      } catch {
        return;
      }
      for (const handler of this.frameHandlers) handler(frame);
    };
    socket.onclose = () => this.scheduleReconnect("connection closed");
    socket.onerror = () => this.scheduleReconnect("socket error");
  }

  private scheduleReconnect(detail: string): void {
    if (this.closed || this.retryTimer !== null) return;
    this.socket = null;
    const delay = Math.min(this.reconnectBaseMs * 2 ** this.retries, this.reconnectMaxMs);
    this.retries += 1;
    this.setStatus("reconnecting", detail);
    this.retryTimer = setTimeout(() => {
      this.retryTimer = null;
      this.connect();
    }, delay);
  }

  subscribe(topic: string, type?: string): void {
    this.subscriptions.set(topic, type);
    this.sendFrame({ op: "subscribe", topic, ...(type ? { type } : {}) });
  }

  advertise(topic: string, type: string): void {
    this.advertisements.set(topic, type);
    this.sendFrame({ op: "advertise", topic, type });
  }

  publish(topic: string, msg: unknown): void {
    this.sendFrame({ op: "publish", topic, msg });
  }

  private sendFrame(frame: BridgeFrame): void {
    if (this.socket && this.status === "connected") {
      this.socket.send(JSON.stringify(frame));
    }
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.socket?.close();
    this.setStatus("closed");
  }
}
