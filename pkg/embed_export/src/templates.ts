/**
 * Prompt templates: each template contains exactly one {concept} placeholder
 * and a set needs at least two templates so downstream per-class variance
 * estimates are defined.
 */

export const PLACEHOLDER = "{concept}";

export class TemplateError extends Error {}

export class PromptTemplateSet {
  readonly templates: string[];

  constructor(templates: string[]) {
    if (templates.length < 2) {
      throw new TemplateError(`need at least 2 templates, got ${templates.length}`);
    }
    for (const t of templates) {
      const count = t.split(PLACEHOLDER).length - 1;
      if (count !== 1) {
        throw new TemplateError(
          `template must contain exactly one ${PLACEHOLDER} placeholder, ` +
            `found ${count} in: ${JSON.stringify(t)}`
        );
      }
    }
    this.templates = [...templates];
  }

  get size(): number {
    return this.templates.length;
  }

  fill(index: number, concept: string): string {
    return this.templates[index].replace(PLACEHOLDER, concept);
  }

  /** One template per non-empty line. */
  static fromLines(text: string): PromptTemplateSet {
    const lines = text
      .split(/\r?\n/)
      .map((l) => l.trim())
      .filter((l) => l.length > 0);
    return new PromptTemplateSet(lines);
  }
}
