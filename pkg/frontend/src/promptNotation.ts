/**
 * Dash notation for prompt phrase lists: "{figure - diagram}".
 *
 * Braces are optional, phrases are separated by " - " (spaced hyphen, so
 * multi-word phrases keep internal hyphens and spaces), and the result is
 * trimmed and lowercased in input order. Matches the server-side parser
 * exactly so prompts can be copy-pasted between the two.
 */

export function parsePromptNotation(text: string): string[] {
  let t = text.trim()
  if (t.startsWith('{') && t.endsWith('}')) {
    t = t.slice(1, -1)
  }
  const phrases = t
    .split(' - ')
    .map((p) => p.trim().toLowerCase())
    .filter((p) => p.length > 0)
  if (phrases.length === 0) {
    throw new Error(`no phrases in prompt ${JSON.stringify(text)}`)
  }
  return phrases
}

export function formatPromptNotation(phrases: readonly string[]): string {
  return '{' + phrases.join(' - ') + '}'
}
