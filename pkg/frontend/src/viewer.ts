// Viewer state machine, kept free of DOM so it is unit-testable: the
// transport, clock, and presenter are injected.

import { OrbitState, defaultOrbit, poseMatrix } from "./camera.js";
import {
  ClientHello,
  DecodedFrame,
  FrameData,
  ServerMessage,
  decodeFrame,
  decodeMessage,
  encodeClientHello,
  encodePoseUpdate,
} from "./protocol.js";

export type ConnectionState = "connecting" | "open" | "denied" | "closed";

export interface Transport {
  send(payload: Uint8Array): void;
  close(): void;
}

export interface ViewerEvents {
  onFrame?(frame: DecodedFrame, poseSeq: number): void;
  onState?(state: ConnectionState, detail?: string): void;
  onStats?(stats: Record<string, unknown>): void;
}

export const POSE_INTERVAL_MS = 20;

export class ViewerState {
  state: ConnectionState = "connecting";
  orbit: OrbitState = defaultOrbit();
  sessionId: number | null = null;
  assets: string[] = [];
  retryAfterS = 0;
  poseSeq = 0;
  displayedSeq = -1;
  framesShown = 0;
  staleDropped = 0;
  decodeErrors = 0;
  posesSent = 0;
  lastStats: Record<string, unknown> = {};

  private transport: Transport | null = null;
  private events: ViewerEvents;
  private hello: Omit<ClientHello, "kind">;

  constructor(hello: Omit<ClientHello, "kind">, events: ViewerEvents = {}) {
    this.hello = hello;
    this.events = events;
  }

  attach(transport: Transport): void {
    this.transport = transport;
    this.state = "connecting";
    transport.send(encodeClientHello(this.hello));
  }

  disconnect(): void {
    this.transport?.close();
    this.transport = null;
    this.setState("closed");
  }

  private setState(state: ConnectionState, detail?: string): void {
    this.state = state;
    this.events.onState?.(state, detail);
  }

  /** Send the current orbit pose; sequence numbers strictly increase. */
  sendPose(): number {
    if (this.state !== "open" || !this.transport) return this.poseSeq;
    this.poseSeq += 1;
    this.posesSent += 1;
    this.transport.send(encodePoseUpdate(this.poseSeq, poseMatrix(this.orbit)));
    return this.poseSeq;
  }

  /** Handle one binary payload from the socket. */
  async onPayload(payload: Uint8Array): Promise<void> {
    let msg: ServerMessage;
    try {
      msg = decodeMessage(payload);
    } catch {
      this.decodeErrors += 1;
      return;
    }
    switch (msg.kind) {
      case "serverHello":
        this.sessionId = msg.sessionId;
        this.assets = msg.assets;
        this.setState("open");
        break;
      case "sessionDenied":
        this.retryAfterS = msg.retryAfterS;
        this.setState("denied", `retry after ${msg.retryAfterS.toFixed(2)}s`);
        break;
      case "frameData":
        await this.present(msg);
        break;
      case "stats":
        this.lastStats = msg.payload;
        this.events.onStats?.(msg.payload);
        break;
      case "bye":
        this.setState("closed");
        break;
    }
  }

  /** Newest-wins display: stale frames (older pose seq) are dropped. */
  async present(msg: FrameData): Promise<void> {
    if (msg.poseSeq < this.displayedSeq) {
      this.staleDropped += 1;
      return;
    }
    let frame: DecodedFrame;
    try {
      frame = await decodeFrame(msg);
    } catch {
      this.decodeErrors += 1;
      return;
    }
    this.displayedSeq = msg.poseSeq;
    this.framesShown += 1;
    this.events.onFrame?.(frame, msg.poseSeq);
  }
}

export interface PoseLoopHandle {
  stop(): void;
}

/** Start the fixed-cadence pose stream (poses flow even while idle). */
export function startPoseLoop(
  viewer: ViewerState,
  setIntervalFn: typeof setInterval = setInterval,
  clearIntervalFn: typeof clearInterval = clearInterval,
  intervalMs: number = POSE_INTERVAL_MS,
): PoseLoopHandle {
  const id = setIntervalFn(() => {
    viewer.sendPose();
  }, intervalMs);
  return { stop: () => clearIntervalFn(id) };
}

export interface BackoffPolicy {
  initialMs: number;
  maxMs: number;
  factor: number;
}

export function nextBackoff(currentMs: number, policy: BackoffPolicy): number {
  if (currentMs <= 0) return policy.initialMs;
  return Math.min(policy.maxMs, currentMs * policy.factor);
}
