#!/usr/bin/env node
import * as fs from "fs";

import { DEFAULT_DIM, DEFAULT_ENCODER, EncoderLoadError, getEncoder } from "./encoder";
import { ExportError, exportEmbeddings } from "./export";
import { PromptTemplateSet, TemplateError } from "./templates";
import { Ceb1Error } from "./ceb1";

const USAGE = `usage: embed-export <concepts.txt> <templates.txt> --out PATH [options]

  concepts.txt   one concept name per line
  templates.txt  one prompt template per line, each with a {concept} placeholder

options:
  --out PATH      output CEB1 file (sidecar JSON written next to it)
  --encoder ID    text encoder id (default: ${DEFAULT_ENCODER})
  --dim N         embedding width for the built-in encoder (default: ${DEFAULT_DIM})
`;

function fail(code: number, message: string): never {
  process.stderr.write(message + "\n");
  process.exit(code);
}

function readLines(path: string, what: string): string[] {
  let text: string;
  try {
    text = fs.readFileSync(path, "utf-8");
  } catch (err) {
    fail(3, `cannot read ${what} file ${path}: ${(err as Error).message}`);
  }
  return text
    .split(/\r?\n/)
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
}

export function main(argv: string[]): number {
  const positional: string[] = [];
  let out: string | undefined;
  let encoderId = DEFAULT_ENCODER;
  let dim = DEFAULT_DIM;

  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--out" || arg === "--encoder" || arg === "--dim") {
      const value = argv[++i];
      if (value === undefined) fail(2, `missing value for ${arg}\n\n${USAGE}`);
      if (arg === "--out") out = value;
      else if (arg === "--encoder") encoderId = value;
      else {
        dim = Number(value);
        if (!Number.isInteger(dim) || dim < 1) fail(2, `--dim must be a positive integer, got ${value}`);
      }
    } else if (arg === "--help" || arg === "-h") {
      process.stdout.write(USAGE);
      return 0;
    } else if (arg.startsWith("-")) {
      fail(2, `unknown option ${arg}\n\n${USAGE}`);
    } else {
      positional.push(arg);
    }
  }

  if (positional.length !== 2 || !out) fail(2, USAGE);
  const [conceptsPath, templatesPath] = positional;

  const concepts = readLines(conceptsPath, "concepts");
  if (concepts.length === 0) fail(2, `no concepts in ${conceptsPath}`);

  try {
    const templates = new PromptTemplateSet(readLines(templatesPath, "templates"));
    const encoder = getEncoder(encoderId, dim);
    const result = exportEmbeddings(concepts, templates, encoder, out);
    process.stdout.write(
      `wrote ${result.numClasses}x${result.numPrompts}x${result.dim} embeddings to ` +
        `${result.path} (sha256 ${result.sha256.slice(0, 12)}...)\n`
    );
    return 0;
  } catch (err) {
    if (err instanceof TemplateError || err instanceof EncoderLoadError) {
      fail(2, (err as Error).message);
    }
    if (err instanceof ExportError || err instanceof Ceb1Error) {
      fail(2, (err as Error).message);
    }
    fail(3, `export failed: ${(err as Error).message}`);
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
