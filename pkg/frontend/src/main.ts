/** Browser entry point: canvas, scrubber and layer toggles over the service. */

import { ApiClient } from "./api.js";
import { compositeOverlay } from "./overlay.js";
import type { Image8 } from "./ppm.js";
import type { RleMask } from "./rle.js";
import { ViewerState, type Layer } from "./state.js";

function start(): void {
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const scrubber = document.getElementById("time") as HTMLInputElement;
  const banner = document.getElementById("banner") as HTMLElement;
  const layerSelect = document.getElementById("layer") as HTMLSelectElement;
  const clearButton = document.getElementById("clear") as HTMLButtonElement;
  const ctx = canvas.getContext("2d")!;

  const draw = (image: Image8, overlay: RleMask | null) => {
    canvas.width = image.width;
    canvas.height = image.height;
    const rgba = compositeOverlay(image, overlay);
    const frame = ctx.createImageData(image.width, image.height);
    frame.data.set(rgba);
    ctx.putImageData(frame, 0, 0);
  };

  const state = new ViewerState(
    new ApiClient(""),
    {
      onFrame: draw,
      onStatus: (message, kind) => {
        banner.textContent = message;
        banner.className = kind;
        if (kind === "toast") setTimeout(() => (banner.textContent = ""), 2500);
      },
    },
    Number(canvas.dataset.width ?? 256),
    Number(canvas.dataset.height ?? 256),
  );

  void state.init().then(() => {
    scrubber.max = String(state.frames - 1);
  });

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const u = Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width);
    const v = Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height);
    void state.clickTrack([u, v]);
  });
  scrubber.addEventListener("input", () => void state.scrubTime(Number(scrubber.value)));
  layerSelect.addEventListener("change", () => {
    state.layer = layerSelect.value as Layer;
    void state.refreshFrame();
  });
  clearButton.addEventListener("click", () => {
    state.clearTrack();
    void state.refreshFrame();
  });
  document.addEventListener("keydown", (ev) => {
    if (ev.key === "ArrowLeft") void state.rotate(-0.15);
    if (ev.key === "ArrowRight") void state.rotate(0.15);
    if (ev.key === "ArrowUp") void state.rotate(0, 0.1);
    if (ev.key === "ArrowDown") void state.rotate(0, -0.1);
  });
}

if (typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", start);
}
