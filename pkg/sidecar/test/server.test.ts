import { AddressInfo } from 'net';
import { Server } from 'http';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { createApp, ServerState } from '../src/server';
import {
  alphaBar,
  decodeTensor,
  encodeTensor,
  PredictRequest,
  PredictResponseSchema,
  tensorByteLength,
} from '../src/protocol';

let server: Server;
let state: ServerState;
let baseUrl: string;

beforeAll(async () => {
  const created = createApp({ role: 'mock', mockValue: 0 });
  state = created.state;
  await new Promise<void>((resolve) => {
    server = created.app.listen(0, '127.0.0.1', resolve);
  });
  const { port } = server.address() as AddressInfo;
  baseUrl = `http://127.0.0.1:${port}`;
});

afterAll(() => {
  server.close();
});

// Deterministic xorshift so fuzz cases are reproducible across runs.
function makeRng(seed: number): () => number {
  let s = seed >>> 0 || 1;
  return () => {
    s ^= s << 13;
    s ^= s >>> 17;
    s ^= s << 5;
    s >>>= 0;
    return s / 0xffffffff;
  };
}

function validRequest(rng: () => number): PredictRequest {
  const batch = 1 + Math.floor(rng() * 4);
  const size = [8, 16, 32][Math.floor(rng() * 3)];
  const elements = batch * size * size * 3;
  const images = new Float32Array(elements);
  for (let i = 0; i < elements; i++) images[i] = rng();
  const poses = Array.from({ length: rng() < 0.5 ? batch : 0 }, () => ({
    azimuth: rng() * Math.PI * 2,
    elevation: rng() - 0.5,
    radius: 2.5,
    fov_y: 0.857,
  }));
  return {
    kind: rng() < 0.5 ? 'noise' : 'image_grad',
    prompt: 'a ceramic mug',
    negative_prompt: '',
    cfg_scale: rng() * 100,
    timestep: 0.02 + rng() * 0.96,
    noise_seed: Math.floor(rng() * 1e9),
    width: size,
    height: size,
    batch,
    poses,
    images_b64: encodeTensor(images),
  };
}

async function post(body: unknown): Promise<Response> {
  return fetch(`${baseUrl}/v1/predict`, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: typeof body === 'string' ? body : JSON.stringify(body),
  });
}

describe('healthz', () => {
  it('reports the role', async () => {
    const res = await fetch(`${baseUrl}/healthz`);
    expect(res.status).toBe(200);
    expect(await res.json()).toEqual({ status: 'ok', role: 'mock' });
  });
});

describe('predict', () => {
  it('returns zero tensors with preserved byte length', async () => {
    const req = validRequest(makeRng(1));
    const res = await post(req);
    expect(res.status).toBe(200);
    const body = PredictResponseSchema.parse(await res.json());
    expect(body.kind).toBe(req.kind);
    const tensors = decodeTensor(body.tensors_b64);
    expect(tensors.byteLength).toBe(tensorByteLength(req));
    expect(tensors.every((v) => v === 0)).toBe(true);
  });

  it('reports the alpha_bar of the requested timestep', async () => {
    const req = { ...validRequest(makeRng(2)), timestep: 0.5 };
    const res = await post(req);
    const body = PredictResponseSchema.parse(await res.json());
    expect(body.alpha_bar).toBeCloseTo(alphaBar(0.5), 12);
  });

  it('is deterministic for identical requests', async () => {
    const req = validRequest(makeRng(3));
    const a = await (await post(req)).json();
    const b = await (await post(req)).json();
    expect(a).toEqual(b);
  });

  it('rejects malformed JSON with 400', async () => {
    const res = await post('{"kind": "noise",');
    expect(res.status).toBe(400);
  });

  it('rejects schema violations with 400', async () => {
    const bad = { ...validRequest(makeRng(4)), timestep: 1.5 };
    expect((await post(bad)).status).toBe(400);
    const missing = validRequest(makeRng(5)) as Partial<PredictRequest>;
    delete missing.images_b64;
    expect((await post(missing)).status).toBe(400);
  });

  it('rejects batch/pose mismatch with 400', async () => {
    const req = validRequest(makeRng(6));
    req.batch = 2;
    req.width = 8;
    req.height = 8;
    req.images_b64 = encodeTensor(new Float32Array(2 * 8 * 8 * 3));
    req.poses = [{ azimuth: 0, elevation: 0, radius: 2.5, fov_y: 0.857 }];
    expect((await post(req)).status).toBe(400);
  });

  it('rejects payloads of the wrong byte length with 400', async () => {
    const req = validRequest(makeRng(7));
    req.images_b64 = encodeTensor(new Float32Array(7));
    expect((await post(req)).status).toBe(400);
  });

  it('answers 503 while busy', async () => {
    state.busy = true;
    try {
      expect((await post(validRequest(makeRng(8)))).status).toBe(503);
    } finally {
      state.busy = false;
    }
    expect((await post(validRequest(makeRng(8)))).status).toBe(200);
  });
});

describe('conformance fuzz', () => {
  it('answers 100 random valid requests with 100 schema-valid responses', async () => {
    const rng = makeRng(1234);
    let ok = 0;
    for (let i = 0; i < 100; i++) {
      const req = validRequest(rng);
      const res = await post(req);
      if (res.status !== 200) continue;
      const parsed = PredictResponseSchema.safeParse(await res.json());
      if (!parsed.success) continue;
      if (decodeTensor(parsed.data.tensors_b64).byteLength !== tensorByteLength(req)) continue;
      ok += 1;
    }
    expect(ok).toBe(100);
  });
});

describe('configuration', () => {
  it('refuses non-mock roles without model assets', () => {
    expect(() => createApp({ role: 'multiview' })).toThrow(/assets/);
  });

  it('serves a configurable canned value', async () => {
    const created = createApp({ role: 'mock', mockValue: 0.25 });
    const local = await new Promise<Server>((resolve) => {
      const s = created.app.listen(0, '127.0.0.1', () => resolve(s));
    });
    try {
      const { port } = local.address() as AddressInfo;
      const res = await fetch(`http://127.0.0.1:${port}/v1/predict`, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(validRequest(makeRng(9))),
      });
      const body = PredictResponseSchema.parse(await res.json());
      expect(decodeTensor(body.tensors_b64).every((v) => v === 0.25)).toBe(true);
    } finally {
      local.close();
    }
  });
});
