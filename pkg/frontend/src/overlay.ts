// Mask overlay rendering: each instance gets a stable color derived from
// its id, drawn at 50% opacity over the scene image. Canvas 2D may be
// unavailable (jsdom in tests); rendering then degrades to the bare image.

export function stableColor(id: string): [number, number, number] {
  // FNV-1a then golden-ratio hue spacing, saturated and bright enough to
  // read over dark scenes
  let h = 0x811c9dc5;
  for (let i = 0; i < id.length; i++) {
    h ^= id.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  const hue = ((h % 360) + 360) % 360;
  return hslToRgb(hue, 0.85, 0.55);
}

function hslToRgb(h: number, s: number, l: number): [number, number, number] {
  const c = (1 - Math.abs(2 * l - 1)) * s;
  const x = c * (1 - Math.abs(((h / 60) % 2) - 1));
  const m = l - c / 2;
  let rgb: [number, number, number];
  if (h < 60) rgb = [c, x, 0];
  else if (h < 120) rgb = [x, c, 0];
  else if (h < 180) rgb = [0, c, x];
  else if (h < 240) rgb = [0, x, c];
  else if (h < 300) rgb = [x, 0, c];
  else rgb = [c, 0, x];
  return [
    Math.round((rgb[0] + m) * 255),
    Math.round((rgb[1] + m) * 255),
    Math.round((rgb[2] + m) * 255),
  ];
}

export interface OverlayLayer {
  maskUrl: string;
  color: [number, number, number];
}

/** Compose image + tinted masks into a canvas; returns false when the
 * environment has no 2D context (tests) and the caller should fall back to
 * plain <img> rendering. */
export async function drawOverlay(
  canvas: HTMLCanvasElement,
  imageUrl: string,
  layers: OverlayLayer[],
  opacity = 0.5,
): Promise<boolean> {
  const ctx = canvas.getContext && canvas.getContext("2d");
  if (!ctx) return false;
  const base = await loadImage(imageUrl);
  if (!base) return false;
  canvas.width = base.naturalWidth;
  canvas.height = base.naturalHeight;
  ctx.drawImage(base, 0, 0);
  for (const layer of layers) {
    const maskImg = await loadImage(layer.maskUrl);
    if (!maskImg) continue;
    const tint = tintMask(maskImg, layer.color, opacity);
    if (tint) ctx.drawImage(tint, 0, 0);
  }
  return true;
}

function tintMask(
  mask: HTMLImageElement,
  color: [number, number, number],
  opacity: number,
): HTMLCanvasElement | null {
  const scratch = document.createElement("canvas");
  scratch.width = mask.naturalWidth;
  scratch.height = mask.naturalHeight;
  const ctx = scratch.getContext && scratch.getContext("2d");
  if (!ctx) return null;
  ctx.drawImage(mask, 0, 0);
  const data = ctx.getImageData(0, 0, scratch.width, scratch.height);
  const px = data.data;
  for (let i = 0; i < px.length; i += 4) {
    const on = px[i] >= 128; // masks are 0/255 single channel
    px[i] = color[0];
    px[i + 1] = color[1];
    px[i + 2] = color[2];
    px[i + 3] = on ? Math.round(opacity * 255) : 0;
  }
  ctx.putImageData(data, 0, 0);
  return scratch;
}

function loadImage(url: string): Promise<HTMLImageElement | null> {
  return new Promise((resolve) => {
    const img = new Image();
    img.crossOrigin = "anonymous";
    img.onload = () => resolve(img);
    img.onerror = () => resolve(null);
    img.src = url;
  });
}
