import { createHash } from "crypto";
import * as fs from "fs";

import { writeCeb1 } from "./ceb1";
import { PromptTemplateSet } from "./templates";
import { TextEncoder } from "./encoder";

export interface ExportResult {
  path: string;
  sidecarPath: string;
  numClasses: number;
  numPrompts: number;
  dim: number;
  sha256: string;
}

export class ExportError extends Error {}

/**
 * Encode every (concept, template) pair and write the result as CEB1 plus a
 * sidecar JSON with the encoder id, the templates, and the file checksum.
 * Values are written exactly as the encoder emits them, in input order.
 */
export function exportEmbeddings(
  concepts: string[],
  templates: PromptTemplateSet,
  encoder: TextEncoder,
  outPath: string
): ExportResult {
  if (concepts.length < 1) throw new ExportError("need at least one concept");
  const seen = new Set<string>();
  for (const c of concepts) {
    if (c.length === 0) throw new ExportError("empty concept name");
    if (seen.has(c)) throw new ExportError(`duplicate concept: ${JSON.stringify(c)}`);
    seen.add(c);
  }

  const k = concepts.length;
  const m = templates.size;
  const d = encoder.dim;
  const values = new Float32Array(k * m * d);
  for (let ki = 0; ki < k; ki++) {
    for (let mi = 0; mi < m; mi++) {
      const emb = encoder.encode(templates.fill(mi, concepts[ki]));
      if (emb.length !== d) {
        throw new ExportError(`encoder returned ${emb.length} dims, expected ${d}`);
      }
      values.set(emb, (ki * m + mi) * d);
    }
  }

  const buf = writeCeb1(concepts, m, d, values);
  fs.writeFileSync(outPath, buf);
  const sha256 = createHash("sha256").update(buf).digest("hex");

  const sidecarPath = outPath + ".json";
  const sidecar = {
    format: "CEB1",
    encoder: encoder.id,
    dim: d,
    classes: concepts,
    templates: templates.templates,
    sha256,
  };
  fs.writeFileSync(sidecarPath, JSON.stringify(sidecar, null, 2) + "\n");
  return { path: outPath, sidecarPath, numClasses: k, numPrompts: m, dim: d, sha256 };
}
