import { z } from 'zod';

export const TENSOR_KINDS = ['noise', 'image_grad'] as const;

export const PoseSchema = z.object({
  azimuth: z.number().finite(),
  elevation: z.number().finite(),
  radius: z.number().positive(),
  fov_y: z.number().positive(),
});

export const PredictRequestSchema = z.object({
  kind: z.enum(TENSOR_KINDS),
  prompt: z.string(),
  negative_prompt: z.string(),
  cfg_scale: z.number().min(0),
  timestep: z.number().gt(0).lt(1),
  noise_seed: z.number().int().min(0),
  width: z.number().int().positive(),
  height: z.number().int().positive(),
  batch: z.number().int().positive(),
  poses: z.array(PoseSchema),
  images_b64: z.string(),
});

export type PredictRequest = z.infer<typeof PredictRequestSchema>;

export const PredictResponseSchema = z.object({
  kind: z.enum(TENSOR_KINDS),
  tensors_b64: z.string(),
  alpha_bar: z.number().gt(0).lt(1),
});

export type PredictResponse = z.infer<typeof PredictResponseSchema>;

/** Expected payload size of a batch of H x W RGB float32 tensors. */
export function tensorByteLength(req: { batch: number; height: number; width: number }): number {
  return req.batch * req.height * req.width * 3 * 4;
}

export function decodeTensor(b64: string): Float32Array {
  const raw = Buffer.from(b64, 'base64');
  // Little-endian float32; Buffer views share memory so copy defensively.
  return new Float32Array(raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.byteLength));
}

export function encodeTensor(values: Float32Array): string {
  return Buffer.from(values.buffer, values.byteOffset, values.byteLength).toString('base64');
}

// Cumulative signal coefficient of the 1000-step scaled-linear noise table
// (linear in sqrt(beta) from 8.5e-4 to 1.2e-2), nearest-index lookup --
// the same table the engine uses.
const SCHEDULE_STEPS = 1000;
const BETA_START = 8.5e-4;
const BETA_END = 1.2e-2;

const alphaBars: number[] = (() => {
  const out: number[] = [];
  let running = 1.0;
  const lo = Math.sqrt(BETA_START);
  const hi = Math.sqrt(BETA_END);
  for (let i = 0; i < SCHEDULE_STEPS; i++) {
    const sqrtBeta = lo + ((hi - lo) * i) / (SCHEDULE_STEPS - 1);
    running *= 1.0 - sqrtBeta * sqrtBeta;
    out.push(running);
  }
  return out;
})();

export function alphaBar(timestep: number): number {
  if (!(timestep > 0 && timestep < 1)) {
    throw new Error(`timestep must lie in (0, 1), got ${timestep}`);
  }
  return alphaBars[Math.round(timestep * (SCHEDULE_STEPS - 1))];
}
