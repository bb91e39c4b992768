import * as fs from "node:fs";
import * as path from "node:path";
import { spawnSync } from "node:child_process";
import * as tf from "@tensorflow/tfjs";
import { beforeAll, describe, expect, it, vi } from "vitest";

import {
  UnsupportedLayerError,
  blobChecksum,
  exportModel,
  flattenPermutation,
  mulberry32,
  samePadding,
  transposeConvKernel,
} from "../src/exporter";
import { naiveForward, readExported } from "./reference";

const OUT = path.resolve(__dirname, "..", "out");

function seedWeights(model: tf.LayersModel, seed: number) {
  const rand = mulberry32(seed);
  for (const layer of model.layers) {
    const ws = layer.getWeights();
    const fresh = ws.map((w) => {
      const vals = new Float32Array(w.size);
      for (let i = 0; i < vals.length; i++) vals[i] = (rand() - 0.3) * 0.8;
      // keep variances positive so batchnorm stays well formed
      if (w.name.includes("moving_variance"))
        for (let i = 0; i < vals.length; i++) vals[i] = 0.5 + Math.abs(vals[i]);
      return tf.tensor(vals, w.shape);
    });
    layer.setWeights(fresh);
  }
}

function tinyMlp(): tf.LayersModel {
  const m = tf.sequential();
  m.add(tf.layers.dense({ units: 12, activation: "relu", inputShape: [8] }));
  m.add(tf.layers.dense({ units: 8, activation: "relu" }));
  m.add(tf.layers.dense({ units: 4 }));
  seedWeights(m, 11);
  return m;
}

function tinyCnnBnBefore(): tf.LayersModel {
  const m = tf.sequential();
  m.add(tf.layers.conv2d({
    filters: 3, kernelSize: 3, inputShape: [8, 8, 2], padding: "same",
  }));
  m.add(tf.layers.batchNormalization({}));
  m.add(tf.layers.activation({ activation: "relu" }));
  m.add(tf.layers.maxPooling2d({ poolSize: 2 }));
  m.add(tf.layers.flatten());
  m.add(tf.layers.dropout({ rate: 0.5 }));
  m.add(tf.layers.dense({ units: 10, activation: "relu" }));
  m.add(tf.layers.dense({ units: 5 }));
  seedWeights(m, 22);
  return m;
}

function tinyCnnBnAfter(): tf.LayersModel {
  const m = tf.sequential();
  m.add(tf.layers.conv2d({
    filters: 4, kernelSize: 3, activation: "relu", inputShape: [6, 6, 1],
  }));
  m.add(tf.layers.batchNormalization({}));
  m.add(tf.layers.maxPooling2d({ poolSize: 2 }));
  m.add(tf.layers.flatten());
  m.add(tf.layers.dense({ units: 6, activation: "relu" }));
  m.add(tf.layers.dense({ units: 3 }));
  seedWeights(m, 33);
  return m;
}

function predictRow(model: tf.LayersModel, kerasInput: number[], shape: number[]): number[] {
  const t = model.predict(tf.tensor(kerasInput, [1, ...shape])) as tf.Tensor;
  return Array.from(t.dataSync());
}

/** channel-first -> keras channels-last flattening for probe replay */
function toKeras(input: number[], shape: number[]): number[] {
  if (shape.length !== 3) return input;
  const [c, h, w] = shape;
  const out = new Array(input.length);
  for (let ci = 0; ci < c; ci++)
    for (let y = 0; y < h; y++)
      for (let x = 0; x < w; x++)
        out[(y * w + x) * c + ci] = input[(ci * h + y) * w + x];
  return out;
}

function exportAndCompare(model: tf.LayersModel, dir: string, range: [number, number]) {
  exportModel({ model, inputRange: range, outDir: dir, probes: 40, seed: 5 });
  const loaded = readExported(path.join(dir, "model.json"), path.join(dir, "model.bin"));
  const probes = JSON.parse(fs.readFileSync(path.join(dir, "probes.json"), "utf-8"));
  let worst = 0;
  const kerasShape = model.inputs[0].shape.slice(1).map(Number);
  for (let i = 0; i < probes.inputs.length; i++) {
    const ours = naiveForward(loaded, probes.inputs[i]);
    const theirs = predictRow(model, toKeras(probes.inputs[i], loaded.manifest.input_shape), kerasShape);
    for (let k = 0; k < theirs.length; k++) {
      const rel = Math.abs(ours[k] - theirs[k]) / Math.max(Math.abs(theirs[k]), 1e-6);
      worst = Math.max(worst, rel);
    }
  }
  return { loaded, probes, worst };
}

describe("unit pieces", () => {
  it("keras same-padding rule", () => {
    expect(samePadding(8, 3, 1)).toEqual([1, 1]);
    expect(samePadding(7, 2, 2)).toEqual([0, 1]);
    expect(samePadding(5, 4, 3)).toEqual([1, 1]);
  });

  it("conv kernel transpose is a bijection", () => {
    const flat = Array.from({ length: 2 * 3 * 4 * 5 }, (_, i) => i);
    const out = transposeConvKernel(flat, 2, 3, 4, 5);
    // spot checks: element (u,v,ci,co) lands at (co,ci,u,v)
    const src = ((1 * 3 + 2) * 4 + 3) * 5 + 4;
    const dst = ((4 * 4 + 3) * 2 + 1) * 3 + 2;
    expect(out[dst]).toBe(flat[src]);
    expect(new Set(out).size).toBe(flat.length);
  });

  it("flatten permutation maps channel-first index to keras index", () => {
    const perm = flattenPermutation(2, 3, 4);
    // mine (c=1, y=0, x=2) -> keras (y=0, x=2, c=1)
    expect(perm[(1 * 2 + 0) * 3 + 2]).toBe((0 * 3 + 2) * 4 + 1);
  });
});

describe("exported models match tfjs within float32 widening", () => {
  it("dense stack", () => {
    const { worst, loaded } = exportAndCompare(tinyMlp(), path.join(OUT, "mlp"), [0, 1]);
    expect(worst).toBeLessThan(1e-4);
    expect(loaded.manifest.input_shape).toEqual([8]);
    expect(loaded.manifest.input_range).toEqual([0, 1]);
  });

  it("cnn with batchnorm before the relu", () => {
    const log = vi.spyOn(console, "log");
    const { worst, loaded } = exportAndCompare(
      tinyCnnBnBefore(), path.join(OUT, "cnn_before"), [0, 1]);
    expect(worst).toBeLessThan(1e-4);
    const bn = loaded.manifest.layers.find((l: any) => l.kind === "batchnorm");
    expect(bn.position).toBe("before_relu");
    expect(loaded.manifest.layers.some((l: any) => l.kind === "pool")).toBe(true);
    // channels-last input 8x8x2 becomes channels-first 2x8x8
    expect(loaded.manifest.input_shape).toEqual([2, 8, 8]);
    const logged = log.mock.calls.map((c) => String(c[0]));
    expect(logged.some((l) => l.includes("dropout") && l.includes("stripped"))).toBe(true);
    log.mockRestore();
  });

  it("cnn with batchnorm after the relu", () => {
    const { worst, loaded } = exportAndCompare(
      tinyCnnBnAfter(), path.join(OUT, "cnn_after"), [-1, 1]);
    expect(worst).toBeLessThan(1e-4);
    const bn = loaded.manifest.layers.find((l: any) => l.kind === "batchnorm");
    expect(bn.position).toBe("after_relu");
    expect(loaded.manifest.input_range).toEqual([-1, 1]);
  });
});

describe("format details", () => {
  it("offsets are 8-aligned and checksum matches", () => {
    const dir = path.join(OUT, "fmt");
    exportModel({ model: tinyMlp(), inputRange: [0, 1], outDir: dir });
    const manifest = JSON.parse(fs.readFileSync(path.join(dir, "model.json"), "utf-8"));
    const blob = fs.readFileSync(path.join(dir, "model.bin"));
    expect(manifest.blob_checksum).toBe(blobChecksum(blob));
    expect(manifest.blob_size).toBe(blob.length);
    for (const lay of manifest.layers)
      for (const key of ["weights", "bias"])
        if (lay[key]) expect(lay[key].offset % 8).toBe(0);
  });

  it("softmax readout is dropped but the argmax is preserved", () => {
    const m = tf.sequential();
    m.add(tf.layers.dense({ units: 10, activation: "relu", inputShape: [6] }));
    m.add(tf.layers.dense({ units: 4, activation: "softmax" }));
    seedWeights(m, 55);
    const dir = path.join(OUT, "softmax");
    exportModel({ model: m, inputRange: [0, 1], outDir: dir, probes: 25, seed: 3 });
    const loaded = readExported(path.join(dir, "model.json"), path.join(dir, "model.bin"));
    const probes = JSON.parse(fs.readFileSync(path.join(dir, "probes.json"), "utf-8"));
    for (let i = 0; i < probes.inputs.length; i++) {
      const logits = Array.from(naiveForward(loaded, probes.inputs[i]));
      const probs: number[] = probes.logits[i];
      const am = (xs: number[]) => xs.indexOf(Math.max(...xs));
      expect(am(logits)).toBe(am(probs));
    }
  });

  it("rejects unsupported layers by name", () => {
    const m = tf.sequential();
    m.add(tf.layers.dense({ units: 4, activation: "tanh", inputShape: [3] }));
    m.add(tf.layers.dense({ units: 2 }));
    expect(() => exportModel({ model: m, inputRange: [0, 1], outDir: path.join(OUT, "bad") }))
      .toThrow(UnsupportedLayerError);
    const m2 = tf.sequential();
    m2.add(tf.layers.dense({ units: 4, activation: "relu", inputShape: [3] }));
    m2.add(tf.layers.dense({ units: 2, activation: "relu" }));
    expect(() => exportModel({ model: m2, inputRange: [0, 1], outDir: path.join(OUT, "bad2") }))
      .toThrow(/readout/);
  });
});

describe("sample artifacts for the pipeline acceptance", () => {
  beforeAll(() => {
    const m = tf.sequential();
    m.add(tf.layers.conv2d({
      filters: 4, kernelSize: 3, padding: "same", inputShape: [8, 8, 2],
    }));
    m.add(tf.layers.batchNormalization({}));
    m.add(tf.layers.activation({ activation: "relu" }));
    m.add(tf.layers.maxPooling2d({ poolSize: 2 }));
    m.add(tf.layers.flatten());
    m.add(tf.layers.dense({ units: 12, activation: "relu" }));
    m.add(tf.layers.dense({ units: 6 }));
    seedWeights(m, 44);
    exportModel({
      model: m, inputRange: [0, 1], outDir: path.join(OUT, "sample"),
      probes: 120, seed: 9,
    });
  });

  it("sample export is self-consistent", () => {
    const loaded = readExported(
      path.join(OUT, "sample", "model.json"), path.join(OUT, "sample", "model.bin"));
    const probes = JSON.parse(
      fs.readFileSync(path.join(OUT, "sample", "probes.json"), "utf-8"));
    expect(probes.inputs.length).toBe(120);
    const logits = naiveForward(loaded, probes.inputs[0]);
    const rel = probes.logits[0].map((v: number, k: number) =>
      Math.abs(logits[k] - v) / Math.max(Math.abs(v), 1e-6));
    expect(Math.max(...rel)).toBeLessThan(1e-4);
  });

  it("pipeline CLI consumes the exported files", () => {
    const probe = spawnSync("python3", ["-c", "import spikemap"], { encoding: "utf-8" });
    if (probe.status !== 0) {
      console.log("[test] spikemap not importable; skipping CLI round trip");
      return;
    }
    const sample = path.join(OUT, "sample");
    const work = path.join(OUT, "sample_pipeline");
    const conv = spawnSync("python3", [
      "-m", "spikemap.cli", "convert",
      "--model", path.join(sample, "model"),
      "--calib", path.join(sample, "probes_data"),
      "--outdir", work,
    ], { encoding: "utf-8" });
    expect(conv.status, conv.stderr).toBe(0);
    const ver = spawnSync("python3", [
      "-m", "spikemap.cli", "verify",
      "--model", path.join(sample, "model"),
      "--scaled", path.join(work, "scaled"),
      "--snn", path.join(work, "snn"),
      "--data", path.join(sample, "probes_data"),
      "--outdir", work,
    ], { encoding: "utf-8" });
    expect(ver.status, ver.stderr).toBe(0);
    expect(ver.stdout).toContain("agreement_pct = 100.0");
  });
});
