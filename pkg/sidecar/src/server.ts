import express, { Express } from 'express';

import { MockModel } from './mock';
import { PredictRequest, PredictRequestSchema, tensorByteLength } from './protocol';

export type ModelRole = 'multiview' | 'singleview' | 'mock';

export interface SidecarConfig {
  role: ModelRole;
  /** Canned tensor value in mock mode. */
  mockValue?: number;
}

export interface ServerState {
  /** When true, /v1/predict answers 503 (model busy, retryable). */
  busy: boolean;
  requestsServed: number;
}

export interface Model {
  predict(req: PredictRequest): { kind: string; tensors_b64: string; alpha_bar: number };
}

function buildModel(config: SidecarConfig): Model {
  if (config.role === 'mock') {
    return new MockModel({ value: config.mockValue });
  }
  // Real diffusion checkpoints are deliberately out of scope here; the
  // protocol surface is identical, so conformance is tested through the mock.
  throw new Error(
    `role '${config.role}' requires model assets that are not bundled; run with --mock`
  );
}

export function createApp(config: SidecarConfig): { app: Express; state: ServerState } {
  const model = buildModel(config);
  const state: ServerState = { busy: false, requestsServed: 0 };
  const app = express();
  app.use(express.json({ limit: '256mb' }));

  app.get('/healthz', (_req, res) => {
    res.json({ status: 'ok', role: config.role });
  });

  app.post('/v1/predict', (req, res) => {
    if (state.busy) {
      res.status(503).json({ error: 'model busy, retry later' });
      return;
    }
    const parsed = PredictRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ error: 'malformed request', issues: parsed.error.issues });
      return;
    }
    const request = parsed.data;
    if (request.poses.length > 0 && request.poses.length !== request.batch) {
      res.status(400).json({
        error: `pose count ${request.poses.length} does not match batch ${request.batch}`,
      });
      return;
    }
    const payloadBytes = Buffer.from(request.images_b64, 'base64').byteLength;
    const expected = tensorByteLength(request);
    if (payloadBytes !== expected) {
      res.status(400).json({
        error: `images payload is ${payloadBytes} bytes, expected ${expected}`,
      });
      return;
    }
    try {
      state.requestsServed += 1;
      res.json(model.predict(request));
    } catch (err) {
      res.status(500).json({ error: `model fault: ${(err as Error).message}` });
    }
  });

  // Body-parser JSON syntax errors surface as a 400, not a stack trace.
  app.use(
    (err: Error, _req: express.Request, res: express.Response, next: express.NextFunction) => {
      if (err instanceof SyntaxError) {
        res.status(400).json({ error: 'malformed JSON body' });
        return;
      }
      next(err);
    }
  );

  return { app, state };
}

function parseArgs(argv: string[]): { config: SidecarConfig; port: number } {
  let role: ModelRole = 'mock';
  let port = 8151;
  let mockValue = 0;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === '--mock') role = 'mock';
    else if (arg === '--role') role = argv[++i] as ModelRole;
    else if (arg === '--port') port = parseInt(argv[++i], 10);
    else if (arg === '--mock-value') mockValue = parseFloat(argv[++i]);
    else throw new Error(`unknown argument: ${arg}`);
  }
  return { config: { role, mockValue }, port };
}

if (require.main === module) {
  const { config, port } = parseArgs(process.argv.slice(2));
  const { app } = createApp(config);
  const server = app.listen(port, '127.0.0.1', () => {
    const address = server.address();
    const bound = typeof address === 'object' && address ? address.port : port;
    // Machine-readable so callers can use --port 0 for an ephemeral port.
    console.log(JSON.stringify({ listening: true, port: bound, role: config.role }));
  });
}
