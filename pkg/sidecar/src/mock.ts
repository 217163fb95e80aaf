import { PredictRequest, PredictResponse, alphaBar, encodeTensor, tensorByteLength } from './protocol';

export interface MockOptions {
  /** Every element of every returned tensor is this value. */
  value?: number;
  /** Override the response kind; defaults to echoing the requested kind. */
  kind?: 'noise' | 'image_grad';
}

/**
 * Assetless model stand-in. Fully deterministic: the response depends only on
 * the request fields and the configured canned value, never on wall time or
 * RNG state.
 */
export class MockModel {
  private readonly value: number;
  private readonly kind?: 'noise' | 'image_grad';

  constructor(options: MockOptions = {}) {
    this.value = options.value ?? 0;
    this.kind = options.kind;
  }

  predict(req: PredictRequest): PredictResponse {
    const elements = tensorByteLength(req) / 4;
    const tensors = new Float32Array(elements);
    tensors.fill(this.value);
    return {
      kind: this.kind ?? req.kind,
      tensors_b64: encodeTensor(tensors),
      alpha_bar: alphaBar(req.timestep),
    };
  }
}
