"""Regenerates src/unicode_tables.cpp from the `regex` module's classes.

The GPT-2 pre-tokenizer needs three predicates: \\p{L}, \\p{N} and \\s.
Run: python3 scripts/gen_unicode_tables.py > src/unicode_tables.cpp
"""
import regex

CLASSES = {"letter": r"\p{L}", "number": r"\p{N}", "space": r"\s"}


def ranges(pattern):
    rx = regex.compile(pattern)
    out, start, prev = [], None, None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            hit = False
        else:
            hit = rx.fullmatch(chr(cp)) is not None
        if hit and start is None:
            start = cp
        if not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


print("// Generated by scripts/gen_unicode_tables.py. Do not edit.")
print('#include "yearspan/unicode.hpp"\n')
print("namespace yearspan::unicode::detail {\n")
for name, pat in CLASSES.items():
    rs = ranges(pat)
    print(f"const CodepointRange k_{name}_ranges[] = {{")
    for a, b in rs:
        print(f"    {{0x{a:X}, 0x{b:X}}},")
    print("};")
    print(f"const std::size_t k_{name}_count = {len(rs)};\n")
print("}  // namespace yearspan::unicode::detail")
