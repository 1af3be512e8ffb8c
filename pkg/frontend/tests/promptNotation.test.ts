import { describe, expect, it } from 'vitest'

import { formatPromptNotation, parsePromptNotation } from '../src/promptNotation.js'

describe('parsePromptNotation', () => {
  it('splits braced dash notation into phrases', () => {
    expect(parsePromptNotation('{figure - diagram}')).toEqual(['figure', 'diagram'])
  })

  it('accepts bare phrases without braces', () => {
    expect(parsePromptNotation('figure')).toEqual(['figure'])
    expect(parsePromptNotation('figure - diagram')).toEqual(['figure', 'diagram'])
  })

  it('keeps internal hyphens of multi-word phrases', () => {
    expect(parsePromptNotation('{black-and-white print - full-page woodcut}')).toEqual([
      'black-and-white print',
      'full-page woodcut',
    ])
  })

  it('trims and lowercases each phrase, preserving order', () => {
    expect(parsePromptNotation('{ Figure -  DIAGRAM }')).toEqual(['figure', 'diagram'])
  })

  it('drops empty segments from stray separators', () => {
    expect(parsePromptNotation('{figure -  - diagram}')).toEqual(['figure', 'diagram'])
  })

  it('throws on an empty prompt', () => {
    expect(() => parsePromptNotation('')).toThrow(/no phrases/)
    expect(() => parsePromptNotation('{}')).toThrow(/no phrases/)
    expect(() => parsePromptNotation('   ')).toThrow(/no phrases/)
  })
})

describe('formatPromptNotation', () => {
  it('round-trips a parsed phrase list', () => {
    const phrases = parsePromptNotation('{figure - diagram - illustration}')
    expect(formatPromptNotation(phrases)).toBe('{figure - diagram - illustration}')
    expect(parsePromptNotation(formatPromptNotation(phrases))).toEqual(phrases)
  })
})
