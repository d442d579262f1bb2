// Wire protocol (version 1), byte-compatible with the server.
//
// Payload: [u8 version][u8 tag][body...], all little-endian.  Over the
// websocket each binary frame carries exactly one payload (no length
// prefix; the socket framing delimits messages).

export const VERSION = 1;

export const TAG = {
  clientHello: 1,
  serverHello: 2,
  sessionDenied: 3,
  poseUpdate: 4,
  frameData: 5,
  sceneEdit: 6,
  stats: 7,
  bye: 8,
} as const;

export const ENC_RAW = 0;
export const ENC_DEFLATE = 1;
export const DEPTH_MISS_U16 = 65535;

export interface ClientHello {
  kind: "clientHello";
  width: number;
  height: number;
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  targetFps: number;
}

export interface ServerHello {
  kind: "serverHello";
  sessionId: number;
  assets: string[];
}

export interface SessionDenied {
  kind: "sessionDenied";
  retryAfterS: number;
}

export interface FrameData {
  kind: "frameData";
  poseSeq: number;
  frameIndex: number;
  encoding: number;
  width: number;
  height: number;
  depthFar: number;
  rgba: Uint8Array; // still encoded (possibly deflated)
  depth: Uint8Array;
}

export interface Stats {
  kind: "stats";
  payload: Record<string, unknown>;
}

export interface ByeMsg {
  kind: "bye";
}

export type ServerMessage = ServerHello | SessionDenied | FrameData | Stats | ByeMsg;

export class DecodeError extends Error {
  constructor(message: string, readonly offset: number) {
    super(`${message} (at byte ${offset})`);
  }
}

export function encodeClientHello(msg: Omit<ClientHello, "kind">): Uint8Array {
  const buf = new ArrayBuffer(2 + 2 + 2 + 4 * 5);
  const view = new DataView(buf);
  view.setUint8(0, VERSION);
  view.setUint8(1, TAG.clientHello);
  view.setUint16(2, msg.width, true);
  view.setUint16(4, msg.height, true);
  view.setFloat32(6, msg.fx, true);
  view.setFloat32(10, msg.fy, true);
  view.setFloat32(14, msg.cx, true);
  view.setFloat32(18, msg.cy, true);
  view.setFloat32(22, msg.targetFps, true);
  return new Uint8Array(buf);
}

export function encodePoseUpdate(seq: number, pose: Float32Array | number[]): Uint8Array {
  if (pose.length !== 16) throw new Error("pose must be 16 floats (row-major 4x4)");
  const buf = new ArrayBuffer(2 + 4 + 64);
  const view = new DataView(buf);
  view.setUint8(0, VERSION);
  view.setUint8(1, TAG.poseUpdate);
  view.setUint32(2, seq, true);
  for (let i = 0; i < 16; i++) view.setFloat32(6 + 4 * i, pose[i], true);
  return new Uint8Array(buf);
}

export function encodeBye(): Uint8Array {
  return new Uint8Array([VERSION, TAG.bye]);
}

export function decodeMessage(payload: Uint8Array): ServerMessage {
  if (payload.length < 2) throw new DecodeError("payload shorter than header", 0);
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const version = view.getUint8(0);
  if (version !== VERSION) throw new DecodeError(`unsupported version ${version}`, 0);
  const tag = view.getUint8(1);
  const body = 2;
  switch (tag) {
    case TAG.serverHello: {
      const sessionId = view.getUint32(body, true);
      const count = view.getUint16(body + 4, true);
      let pos = body + 6;
      const assets: string[] = [];
      const text = new TextDecoder();
      for (let i = 0; i < count; i++) {
        const len = view.getUint16(pos, true);
        pos += 2;
        assets.push(text.decode(payload.subarray(pos, pos + len)));
        pos += len;
      }
      return { kind: "serverHello", sessionId, assets };
    }
    case TAG.sessionDenied:
      return { kind: "sessionDenied", retryAfterS: view.getFloat32(body, true) };
    case TAG.frameData: {
      const poseSeq = view.getUint32(body, true);
      const frameIndex = view.getUint32(body + 4, true);
      const encoding = view.getUint8(body + 8);
      const width = view.getUint16(body + 9, true);
      const height = view.getUint16(body + 11, true);
      const depthFar = view.getFloat32(body + 13, true);
      let pos = body + 17;
      let rgba: Uint8Array;
      let depth: Uint8Array;
      if (encoding === ENC_RAW) {
        const nRgba = width * height * 4;
        const nDepth = width * height * 2;
        rgba = payload.subarray(pos, pos + nRgba);
        depth = payload.subarray(pos + nRgba, pos + nRgba + nDepth);
        if (rgba.length !== nRgba || depth.length !== nDepth) {
          throw new DecodeError("frame payload truncated", pos);
        }
      } else if (encoding === ENC_DEFLATE) {
        const lenR = view.getUint32(pos, true);
        pos += 4;
        rgba = payload.subarray(pos, pos + lenR);
        if (rgba.length !== lenR) throw new DecodeError("compressed rgba truncated", pos);
        pos += lenR;
        const lenD = view.getUint32(pos, true);
        pos += 4;
        depth = payload.subarray(pos, pos + lenD);
        if (depth.length !== lenD) throw new DecodeError("compressed depth truncated", pos);
      } else {
        throw new DecodeError(`unknown frame encoding ${encoding}`, body + 8);
      }
      return {
        kind: "frameData", poseSeq, frameIndex, encoding, width, height, depthFar,
        rgba: rgba.slice(), depth: depth.slice(),
      };
    }
    case TAG.stats: {
      const len = view.getUint32(body, true);
      const text = new TextDecoder().decode(payload.subarray(body + 4, body + 4 + len));
      return { kind: "stats", payload: JSON.parse(text) };
    }
    case TAG.bye:
      return { kind: "bye" };
    default:
      throw new DecodeError(`unknown message tag ${tag}`, 1);
  }
}

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  // zlib-wrapped deflate, matching the server's compressor
  const ds = new DecompressionStream("deflate");
  const stream = new Blob([data as BlobPart]).stream().pipeThrough(ds);
  const out = new Uint8Array(await new Response(stream).arrayBuffer());
  return out;
}

export interface DecodedFrame {
  width: number;
  height: number;
  rgba: Uint8Array; // H*W*4
  depth: Uint16Array; // H*W quantized; DEPTH_MISS_U16 = miss
  depthFar: number;
}

export async function decodeFrame(msg: FrameData): Promise<DecodedFrame> {
  let rgba = msg.rgba;
  let depth = msg.depth;
  if (msg.encoding === ENC_DEFLATE) {
    [rgba, depth] = await Promise.all([inflate(rgba), inflate(depth)]);
  }
  const n = msg.width * msg.height;
  if (rgba.length !== n * 4) throw new DecodeError("rgba size mismatch", 0);
  if (depth.length !== n * 2) throw new DecodeError("depth size mismatch", rgba.length);
  const depth16 = new Uint16Array(n);
  const dv = new DataView(depth.buffer, depth.byteOffset, depth.byteLength);
  for (let i = 0; i < n; i++) depth16[i] = dv.getUint16(i * 2, true);
  return {
    width: msg.width,
    height: msg.height,
    rgba,
    depth: depth16,
    depthFar: msg.depthFar,
  };
}

export function depthToFalseColor(frame: DecodedFrame): Uint8Array {
  // near = warm, far = cool, miss = transparent black
  const out = new Uint8Array(frame.width * frame.height * 4);
  for (let i = 0; i < frame.depth.length; i++) {
    const q = frame.depth[i];
    if (q === DEPTH_MISS_U16) continue;
    const t = q / 65534;
    out[i * 4 + 0] = Math.round(255 * (1 - t));
    out[i * 4 + 1] = Math.round(64 * (1 - Math.abs(0.5 - t) * 2));
    out[i * 4 + 2] = Math.round(255 * t);
    out[i * 4 + 3] = 255;
  }
  return out;
}
