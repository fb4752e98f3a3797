"""Freezes Hugging Face GPT-2 tokenizations into tests/data/tokenizer_cases.json."""

import json
import os

from transformers import GPT2Tokenizer

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "..", "..", "data", "gpt2")
OUT = os.path.join(HERE, "..", "data", "tokenizer_cases.json")

TEXTS = [
    "",
    " 1700",
    " 1732",
    "The war lasted from the year 1732 to the year 17",
    "Hello world",
    "  double  spaces   here ",
    "tabs\tand\nnewlines\r\n",
    "I'm you're he's we'll they'd I've don't",
    "'S 'T 'RE uppercase contractions",
    "Numbers 1234567 3.14 -42 1,000",
    "café naïve résumé über Straße",
    "Ελληνικά кириллица עברית العربية",
    "漢字かな交じり文 한국어",
    "emoji \U0001f600\U0001f680\U0001f44d\U0001f3fd",
    "<|endoftext is plain text here",
    "$ 1755 to $ 17",
    "1599, 1607, 1633, 1679, 1742, 17",
    "    indented code\n\tfoo()",
    "!!! ??? ... --- ___",
    "mixed123abc456 abc123",
    " non-breaking em-space",
    "zero​width",
    "combining é accents",
    "ﬁ ligature and ＦＵＬＬＷＩＤＴＨ",
    "a" * 60,
    " " * 7 + "x",
    "\n\n\n",
    "The 01 twin",
]


def main():
    tok = GPT2Tokenizer(os.path.join(DATA, "encoder.json"), os.path.join(DATA, "vocab.bpe"))
    cases = []
    for t in TEXTS:
        cases.append({"text": t, "ids": tok.encode(t)})
    # Every year 1100..1799 with a leading space, the pool-defining tokenization.
    years = {str(y): tok.encode(" %d" % y) for y in range(1100, 1800)}
    two_digit = {"%02d" % v: tok.convert_tokens_to_ids("%02d" % v) for v in range(100)}
    with open(OUT, "w", encoding="utf-8") as f:
        json.dump({"cases": cases, "years": years, "two_digit": two_digit}, f, ensure_ascii=False, indent=0)


if __name__ == "__main__":
    main()
