/**
 * Export a TensorFlow.js layers model into the spikemap interchange format:
 * a JSON manifest plus a blob of little-endian float64 tensors.
 *
 * Supported architecture grammar: sequential stacks of Dense, Conv2D
 * (square strides, valid/same padding), BatchNormalization (before or after
 * the ReLU), MaxPooling2D (window == stride, valid padding), Flatten,
 * standalone ReLU/Activation layers, and Dropout (stripped with a log
 * line). The final Dense layer is the readout; a softmax there is dropped
 * since only the argmax is consumed downstream.
 *
 * TensorFlow.js is channels-last; the interchange format is channels-first
 * with conv kernels as [out_ch, in_ch, kh, kw] and dense weights as
 * [out, in]. Kernels are transposed accordingly, and a Dense layer that
 * follows a Flatten gets its input columns permuted from (h, w, c) order to
 * (c, h, w) order. Checkpoint weights are float32; they are widened to
 * float64 at export, so downstream comparisons should allow for about 1e-4
 * relative slack on logits.
 */

import * as crypto from "node:crypto";
import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";

export interface ExportSpec {
  model: tf.LayersModel;
  inputRange: [number, number];
  outDir: string;
  /** number of random probe inputs recorded next to the model */
  probes?: number;
  seed?: number;
}

export interface TensorRef {
  offset: number;
  shape: number[];
}

interface LayerEntry {
  kind: string;
  [key: string]: unknown;
}

export class UnsupportedLayerError extends Error {}

// -- blob writing -----------------------------------------------------------

export class BlobWriter {
  private chunks: Buffer[] = [];
  private size = 0;

  put(values: ArrayLike<number>, shape: number[]): TensorRef {
    const buf = Buffer.alloc(values.length * 8);
    for (let i = 0; i < values.length; i++) {
      buf.writeDoubleLE(values[i], i * 8);
    }
    const ref = { offset: this.size, shape };
    this.chunks.push(buf);
    this.size += buf.length;
    return ref;
  }

  bytes(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export function blobChecksum(blob: Buffer): string {
  return crypto.createHash("sha256").update(blob).digest("hex").slice(0, 16);
}

// -- deterministic probe inputs ----------------------------------------------

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

// -- weight reshuffling -------------------------------------------------------

/** [kh, kw, inC, outC] -> [outC, inC, kh, kw], both flat row-major. */
export function transposeConvKernel(
  flat: ArrayLike<number>, kh: number, kw: number, inC: number, outC: number,
): Float64Array {
  const out = new Float64Array(flat.length);
  for (let u = 0; u < kh; u++)
    for (let v = 0; v < kw; v++)
      for (let ci = 0; ci < inC; ci++)
        for (let co = 0; co < outC; co++) {
          const src = ((u * kw + v) * inC + ci) * outC + co;
          const dst = ((co * inC + ci) * kh + u) * kw + v;
          out[dst] = flat[src];
        }
  return out;
}

/** Column permutation taking channels-last flat order to channels-first. */
export function flattenPermutation(h: number, w: number, c: number): number[] {
  const perm: number[] = new Array(h * w * c);
  for (let ci = 0; ci < c; ci++)
    for (let y = 0; y < h; y++)
      for (let x = 0; x < w; x++)
        perm[(ci * h + y) * w + x] = (y * w + x) * c + ci;
  return perm;
}

/** tfjs dense kernel [in, out] -> [out, in], optionally permuting inputs. */
export function transposeDenseKernel(
  flat: ArrayLike<number>, nIn: number, nOut: number, perm: number[] | null,
): Float64Array {
  const out = new Float64Array(flat.length);
  for (let o = 0; o < nOut; o++)
    for (let i = 0; i < nIn; i++) {
      const src = perm ? perm[i] : i;
      out[o * nIn + i] = flat[src * nOut + o];
    }
  return out;
}

/** Keras 'same' padding amounts (before, after) for one spatial axis. */
export function samePadding(size: number, kernel: number, stride: number): [number, number] {
  const outSize = Math.ceil(size / stride);
  const total = Math.max((outSize - 1) * stride + kernel - size, 0);
  const before = Math.floor(total / 2);
  return [before, total - before];
}

// -- the layer walk -----------------------------------------------------------

function config(layer: tf.layers.Layer): Record<string, any> {
  return layer.getConfig() as Record<string, any>;
}

function activationOf(layer: tf.layers.Layer): string {
  const cfg = config(layer);
  const act = cfg.activation;
  if (act == null) return "linear";
  return typeof act === "string" ? act : act.constructor?.name ?? "linear";
}

function weightsOf(layer: tf.layers.Layer): Float32Array[] {
  return layer.getWeights().map((w) => w.dataSync() as Float32Array);
}

interface WalkState {
  entries: LayerEntry[];
  /** keras-layout spatial shape [h, w, c], or [n] once flat */
  shape: number[];
  /** pending column permutation for the next dense layer */
  perm: number[] | null;
  /** index in `entries` of the most recent Dense/Conv2D */
  lastParam: number;
  log: (msg: string) => void;
  writer: BlobWriter;
}

function lastParamEntry(st: WalkState): LayerEntry {
  if (st.lastParam < 0) throw new UnsupportedLayerError("activation with no preceding layer");
  return st.entries[st.lastParam];
}

function streamIsRectified(st: WalkState): boolean {
  for (let i = st.entries.length - 1; i >= 0; i--) {
    const e = st.entries[i];
    if (e.kind === "dense" || e.kind === "conv2d") return e.relu === true;
    if (e.kind === "batchnorm") return false; // two BNs in a row unsupported anyway
  }
  return false;
}

function handleDense(layer: tf.layers.Layer, st: WalkState) {
  const cfg = config(layer);
  const [kernel, bias] = weightsOf(layer);
  const nIn = st.shape.length === 1 ? st.shape[0] : -1;
  if (nIn < 0) throw new UnsupportedLayerError(`dense '${layer.name}' on unflattened input`);
  const nOut = cfg.units as number;
  const w = transposeDenseKernel(kernel, nIn, nOut, st.perm);
  st.perm = null;
  const act = activationOf(layer);
  if (!["linear", "relu", "softmax"].includes(act))
    throw new UnsupportedLayerError(`dense '${layer.name}' activation '${act}'`);
  st.entries.push({
    kind: "dense",
    relu: act === "relu",
    weights: st.writer.put(w, [nOut, nIn]),
    bias: st.writer.put(bias ?? new Float64Array(nOut), [nOut]),
  });
  st.lastParam = st.entries.length - 1;
  st.shape = [nOut];
}

function handleConv(layer: tf.layers.Layer, st: WalkState) {
  const cfg = config(layer);
  if (st.shape.length !== 3)
    throw new UnsupportedLayerError(`conv '${layer.name}' on non-spatial input`);
  if (cfg.dataFormat && cfg.dataFormat !== "channelsLast")
    throw new UnsupportedLayerError(`conv '${layer.name}' dataFormat ${cfg.dataFormat}`);
  const [h, w, cIn] = st.shape;
  const [kh, kw] = cfg.kernelSize as [number, number];
  const strides = cfg.strides as [number, number];
  if (strides[0] !== strides[1])
    throw new UnsupportedLayerError(`conv '${layer.name}' non-square strides`);
  const stride = strides[0];
  const cOut = cfg.filters as number;
  let padding: [number, number, number, number] = [0, 0, 0, 0];
  if (cfg.padding === "same") {
    const [top, bottom] = samePadding(h, kh, stride);
    const [left, right] = samePadding(w, kw, stride);
    padding = [top, bottom, left, right];
  } else if (cfg.padding !== "valid") {
    throw new UnsupportedLayerError(`conv '${layer.name}' padding '${cfg.padding}'`);
  }
  const act = activationOf(layer);
  if (!["linear", "relu"].includes(act))
    throw new UnsupportedLayerError(`conv '${layer.name}' activation '${act}'`);
  const [kernel, bias] = weightsOf(layer);
  const kcf = transposeConvKernel(kernel, kh, kw, cIn, cOut);
  st.entries.push({
    kind: "conv2d",
    relu: act === "relu",
    stride,
    padding,
    weights: st.writer.put(kcf, [cOut, cIn, kh, kw]),
    bias: st.writer.put(bias ?? new Float64Array(cOut), [cOut]),
  });
  st.lastParam = st.entries.length - 1;
  const oh = Math.floor((h + padding[0] + padding[1] - kh) / stride) + 1;
  const ow = Math.floor((w + padding[2] + padding[3] - kw) / stride) + 1;
  st.shape = [oh, ow, cOut];
}

function handleBatchNorm(layer: tf.layers.Layer, st: WalkState) {
  const cfg = config(layer);
  if (st.lastParam < 0)
    throw new UnsupportedLayerError(`batchnorm '${layer.name}' before any layer`);
  const c = st.shape[st.shape.length - 1];
  const ws = weightsOf(layer);
  if (ws.length !== 4)
    throw new UnsupportedLayerError(`batchnorm '${layer.name}' without scale+center`);
  const [gamma, beta, mean, variance] = ws;
  // position resolves later: a following ReLU claims it as before-relu,
  // otherwise it sits after an already-rectified stream
  const position = streamIsRectified(st) ? "after_relu" : "pending";
  st.entries.push({
    kind: "batchnorm",
    position,
    epsilon: (cfg.epsilon as number) ?? 1e-3,
    mu: st.writer.put(mean, [c]),
    sigma_sq: st.writer.put(variance, [c]),
    gamma: st.writer.put(gamma, [c]),
    beta: st.writer.put(beta, [c]),
  });
}

function handleRelu(layer: tf.layers.Layer, st: WalkState) {
  const last = st.entries[st.entries.length - 1];
  if (last?.kind === "batchnorm" && last.position === "pending") {
    last.position = "before_relu";
    lastParamEntry(st).relu = true;
    return;
  }
  const param = lastParamEntry(st);
  if (param.relu)
    throw new UnsupportedLayerError(`duplicate activation '${layer.name}'`);
  param.relu = true;
}

function handlePool(layer: tf.layers.Layer, st: WalkState) {
  const cfg = config(layer);
  const pool = cfg.poolSize as [number, number];
  const strides = (cfg.strides ?? pool) as [number, number];
  if (pool[0] !== pool[1] || strides[0] !== pool[0] || strides[1] !== pool[1])
    throw new UnsupportedLayerError(`pool '${layer.name}' needs window == stride`);
  if (cfg.padding && cfg.padding !== "valid")
    throw new UnsupportedLayerError(`pool '${layer.name}' padding '${cfg.padding}'`);
  const [h, w, c] = st.shape;
  st.entries.push({ kind: "pool", window: pool[0], stride: pool[0] });
  st.shape = [Math.floor(h / pool[0]), Math.floor(w / pool[0]), c];
}

function handleFlatten(st: WalkState) {
  if (st.shape.length === 3) {
    const [h, w, c] = st.shape;
    st.perm = flattenPermutation(h, w, c);
    st.shape = [h * w * c];
  }
  st.entries.push({ kind: "flatten" });
}

export function exportModel(spec: ExportSpec): { manifestPath: string; blobPath: string } {
  const { model } = spec;
  const writer = new BlobWriter();
  const log = (msg: string) => console.log(`[exporter] ${msg}`);
  const inShape = model.inputs[0].shape.slice(1).map(Number);
  const st: WalkState = {
    entries: [],
    shape: [...inShape],
    perm: null,
    lastParam: -1,
    log,
    writer,
  };
  for (const layer of model.layers) {
    const cls = layer.getClassName();
    switch (cls) {
      case "InputLayer":
        break;
      case "Dense":
        handleDense(layer, st);
        break;
      case "Conv2D":
        handleConv(layer, st);
        break;
      case "BatchNormalization":
        handleBatchNorm(layer, st);
        break;
      case "MaxPooling2D":
        handlePool(layer, st);
        break;
      case "Flatten":
        handleFlatten(st);
        break;
      case "Activation": {
        const act = config(layer).activation;
        if (act === "relu") handleRelu(layer, st);
        else if (act === "softmax") log(`softmax '${layer.name}' dropped (argmax only)`);
        else throw new UnsupportedLayerError(`activation '${act}' unsupported`);
        break;
      }
      case "ReLU":
        handleRelu(layer, st);
        break;
      case "Dropout":
        log(`dropout layer '${layer.name}' stripped`);
        break;
      default:
        throw new UnsupportedLayerError(`layer class '${cls}' unsupported`);
    }
  }
  for (const e of st.entries) {
    if (e.kind === "batchnorm" && e.position === "pending")
      throw new UnsupportedLayerError("batchnorm without a resolvable ReLU position");
  }
  const last = st.entries[st.entries.length - 1];
  if (!last || last.kind !== "dense" || last.relu)
    throw new UnsupportedLayerError("model must end in a linear/softmax Dense readout");

  // channels-last input shape -> channels-first in the manifest
  const inputShape =
    inShape.length === 3 ? [inShape[2], inShape[0], inShape[1]] : [...inShape];
  const blob = writer.bytes();
  const manifest = {
    format_version: 1,
    kind: "relu_network",
    input_shape: inputShape,
    input_range: spec.inputRange,
    layers: st.entries,
    blob_size: blob.length,
    blob_checksum: blobChecksum(blob),
  };
  fs.mkdirSync(spec.outDir, { recursive: true });
  const manifestPath = path.join(spec.outDir, "model.json");
  const blobPath = path.join(spec.outDir, "model.bin");
  fs.writeFileSync(blobPath, blob);
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 1));
  if (spec.probes && spec.probes > 0) writeProbes(spec, inShape);
  return { manifestPath, blobPath };
}

/** Random inputs plus the model's float32 logits, both channels-first. */
function writeProbes(spec: ExportSpec, kerasShape: number[]) {
  const n = spec.probes ?? 100;
  const rand = mulberry32(spec.seed ?? 1);
  const [p, q] = spec.inputRange;
  const count = kerasShape.reduce((a, b) => a * b, 1);
  const batch = new Float32Array(n * count);
  for (let i = 0; i < batch.length; i++) batch[i] = p + (q - p) * rand();
  const logitsT = spec.model.predict(
    tf.tensor(batch, [n, ...kerasShape] as number[]),
  ) as tf.Tensor;
  const logits = logitsT.dataSync() as Float32Array;
  const nClasses = logitsT.shape[1] as number;

  const toChannelFirst = (row: Float32Array): number[] => {
    if (kerasShape.length !== 3) return Array.from(row);
    const [h, w, c] = kerasShape;
    const out = new Array(count);
    for (let ci = 0; ci < c; ci++)
      for (let y = 0; y < h; y++)
        for (let x = 0; x < w; x++)
          out[(ci * h + y) * w + x] = row[(y * w + x) * c + ci];
    return out;
  };

  const inputs: number[][] = [];
  const logitRows: number[][] = [];
  const flat = new Float64Array(n * count);
  for (let i = 0; i < n; i++) {
    const row = toChannelFirst(batch.subarray(i * count, (i + 1) * count));
    inputs.push(row);
    for (let j = 0; j < count; j++) flat[i * count + j] = row[j];
    logitRows.push(Array.from(logits.subarray(i * nClasses, (i + 1) * nClasses)));
  }
  const inputShape =
    kerasShape.length === 3
      ? [kerasShape[2], kerasShape[0], kerasShape[1]]
      : [...kerasShape];
  fs.writeFileSync(
    path.join(spec.outDir, "probes.json"),
    JSON.stringify({ input_range: spec.inputRange, inputs, logits: logitRows }),
  );
  // the same probes as a dataset container, so the pipeline CLI can consume them
  const writer = new BlobWriter();
  const imagesRef = writer.put(flat, [n, ...inputShape]);
  const blob = writer.bytes();
  fs.writeFileSync(path.join(spec.outDir, "probes.bin"), blob);
  fs.writeFileSync(
    path.join(spec.outDir, "probes_data.json"),
    JSON.stringify({
      format_version: 1,
      kind: "dataset",
      input_shape: inputShape,
      n_records: n,
      images: imagesRef,
      blob_size: blob.length,
      blob_checksum: blobChecksum(blob),
    }, null, 1),
  );
  fs.copyFileSync(
    path.join(spec.outDir, "probes.bin"),
    path.join(spec.outDir, "probes_data.bin"),
  );
}

// -- loading a saved layers model without tfjs-node ---------------------------

export function fileIOHandler(modelJsonPath: string): tf.io.IOHandler {
  return {
    load: async () => {
      const dir = path.dirname(modelJsonPath);
      const spec = JSON.parse(fs.readFileSync(modelJsonPath, "utf-8"));
      const weightSpecs: tf.io.WeightsManifestEntry[] = [];
      const buffers: Buffer[] = [];
      for (const group of spec.weightsManifest ?? []) {
        weightSpecs.push(...group.weights);
        for (const p of group.paths) buffers.push(fs.readFileSync(path.join(dir, p)));
      }
      const weightData = Buffer.concat(buffers);
      return {
        modelTopology: spec.modelTopology,
        weightSpecs,
        weightData: weightData.buffer.slice(
          weightData.byteOffset, weightData.byteOffset + weightData.byteLength,
        ),
      };
    },
  };
}

// -- CLI -----------------------------------------------------------------------

async function mainCli(argv: string[]) {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) args.set(argv[i], argv[i + 1]);
  const modelPath = args.get("--model");
  const range = (args.get("--range") ?? "0,1").split(",").map(Number);
  const outDir = args.get("--out") ?? "out/exported";
  if (!modelPath) {
    console.error(
      "usage: exporter --model <model.json> [--range p,q] [--out dir] [--probes N] [--seed S]");
    process.exit(2);
  }
  const model = await tf.loadLayersModel(fileIOHandler(modelPath));
  exportModel({
    model,
    inputRange: [range[0], range[1]],
    outDir,
    probes: Number(args.get("--probes") ?? 100),
    seed: Number(args.get("--seed") ?? 1),
  });
  console.log(`exported to ${outDir}`);
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("exporter.ts") || entry.endsWith("exporter.js")) {
  mainCli(process.argv.slice(2)).catch((err) => {
    console.error(err);
    process.exit(1);
  });
}
