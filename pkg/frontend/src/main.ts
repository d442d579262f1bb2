// Browser entry: canvas display, orbit controls, websocket wiring, and the
// stats overlay.  Several tabs can each open their own session; the session
// id badge makes the shared-ray dedup stats legible across users.

import { dolly, pan, rotate } from "./camera.js";
import { DecodedFrame, depthToFalseColor } from "./protocol.js";
import { BackoffPolicy, ViewerState, nextBackoff, startPoseLoop } from "./viewer.js";

const BACKOFF: BackoffPolicy = { initialMs: 500, maxMs: 8000, factor: 2 };

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function serverUrl(): string {
  const q = new URLSearchParams(location.search);
  return q.get("server") ?? `ws://${location.host}`;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d")!;
  const banner = el<HTMLDivElement>("banner");
  const overlay = el<HTMLDivElement>("overlay");
  const depthToggle = el<HTMLInputElement>("depth-toggle");

  const width = canvas.width;
  const height = canvas.height;
  const fov = 60;
  const fx = width / (2 * Math.tan((fov * Math.PI) / 360));

  let lastFrame: DecodedFrame | null = null;
  let framesInWindow = 0;
  let fps = 0;
  setInterval(() => {
    fps = framesInWindow;
    framesInWindow = 0;
  }, 1000);

  const viewer = new ViewerState(
    {
      width,
      height,
      fx,
      fy: fx,
      cx: width / 2,
      cy: height / 2,
      targetFps: 20,
    },
    {
      onFrame: (frame) => {
        lastFrame = frame;
        framesInWindow += 1;
      },
      onState: (state, detail) => {
        banner.textContent =
          state === "denied"
            ? `session denied: ${detail ?? "server busy"}`
            : state === "open"
              ? `session ${viewer.sessionId} | assets: ${viewer.assets.join(", ")}`
              : state;
        banner.className = state;
      },
    },
  );

  let backoffMs = 0;
  function connect(): void {
    const ws = new WebSocket(serverUrl());
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      backoffMs = 0;
      viewer.attach({
        send: (payload) => ws.send(payload),
        close: () => ws.close(),
      });
    };
    ws.onmessage = (ev) => {
      void viewer.onPayload(new Uint8Array(ev.data as ArrayBuffer));
    };
    ws.onclose = () => {
      if (viewer.state === "denied") {
        backoffMs = Math.max(viewer.retryAfterS * 1000, BACKOFF.initialMs);
      } else {
        backoffMs = nextBackoff(backoffMs, BACKOFF);
      }
      setTimeout(connect, backoffMs);
    };
    ws.onerror = () => ws.close();
  }
  connect();
  startPoseLoop(viewer);

  // orbit controls: drag = rotate, wheel = dolly, arrows = pan
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointerup", () => (dragging = false));
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) return;
    rotate(viewer.orbit, -(e.clientX - lastX) * 0.01, (e.clientY - lastY) * 0.01);
    lastX = e.clientX;
    lastY = e.clientY;
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    dolly(viewer.orbit, e.deltaY > 0 ? 1.1 : 1 / 1.1);
  });
  window.addEventListener("keydown", (e) => {
    const step = 0.02;
    if (e.key === "ArrowLeft") pan(viewer.orbit, -step, 0);
    if (e.key === "ArrowRight") pan(viewer.orbit, step, 0);
    if (e.key === "ArrowUp") pan(viewer.orbit, 0, step);
    if (e.key === "ArrowDown") pan(viewer.orbit, 0, -step);
  });

  function draw(): void {
    if (lastFrame) {
      const pixels = depthToggle.checked ? depthToFalseColor(lastFrame) : lastFrame.rgba;
      // copy into a fresh clamped array so the buffer type is a plain ArrayBuffer
      const clamped = new Uint8ClampedArray(pixels.length);
      clamped.set(pixels);
      const img = new ImageData(clamped, lastFrame.width, lastFrame.height);
      ctx.putImageData(img, 0, 0);
    }
    const farm = (viewer.lastStats["farm"] ?? {}) as Record<string, unknown>;
    overlay.textContent = [
      `fps ${fps}`,
      `pose #${viewer.poseSeq}`,
      `frame seq ${viewer.displayedSeq}`,
      `stale ${viewer.staleDropped}`,
      `cache hits ${farm["cache_hits"] ?? "-"}`,
      `shared ${farm["shared_tasks"] ?? "-"}`,
    ].join("  |  ");
    requestAnimationFrame(draw);
  }
  requestAnimationFrame(draw);
}

main();
