"""Build a shakespeare-char style corpus from Project Gutenberg play texts.

The reference tiny-shakespeare file is dialogue only, formatted as

    First Citizen:
    Before we proceed any further, hear me speak.

over a 65-symbol alphabet.  This script rewrites the plays shipped in the
``shakespeare`` sdist on PyPI (``shksprdata/texts/*_gut.txt``) into that
shape: stage directions dropped, ``SPEAKER.`` headings turned into
``Speaker:``, characters outside the alphabet removed, and plays appended in
a fixed order until the target size is reached.

    pip download --no-deps shakespeare && tar xzf shakespeare-0.6.tar.gz
    python scripts/build_shakespeare_char.py shakespeare-0.6/shksprdata/texts \
        data/shakespeare_char/input.txt
"""

import argparse
import re
from pathlib import Path

ALPHABET = set("\n !$&',-.3:;?ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz")
PLAYS = [
    "coriolanus", "richard_iii", "richard_ii", "henry_vi_part_3", "romeo_and_juliet",
    "winters_tale", "taming_of_the_shrew", "tempest", "julius_caesar", "hamlet",
    "lear", "macbeth", "othello", "henry_iv_part_1", "henry_v", "measure_for_measure",
]
SPEAKER = re.compile(r"^([A-Z][A-Z' ,-]*[A-Z])\.\s*$")
TARGET = 1_115_394

_REPLACE = {'"': "'", "`": "'", "_": "", "[": "", "]": "", "(": ",", ")": ",", "*": "", "|": ""}


def title(name: str) -> str:
    return " ".join(w.capitalize() for w in name.lower().split())


def clean(text: str) -> str:
    for a, b in _REPLACE.items():
        text = text.replace(a, b)
    return "".join(c for c in text if c in ALPHABET)


def play_dialogue(raw: str) -> str:
    lines = raw.replace("\r", "").split("\n")
    start = next((i for i, l in enumerate(lines) if l.strip().startswith("ACT I")), 0)
    out, speech, speaker, in_dir = [], [], None, False

    def flush():
        if speaker and speech:
            out.append(f"{speaker}:\n" + "\n".join(speech) + "\n")

    for line in lines[start:]:
        s = line.strip()
        if in_dir:
            in_dir = "]" not in s
            continue
        if s.startswith("["):
            in_dir = "]" not in s
            continue
        s = re.sub(r"\[[^\]]*\]", "", s).strip()
        if re.match(r"^(ACT|SCENE|THE END|EPILOGUE|PROLOGUE)\b", s):
            flush()
            speaker, speech = None, []
            continue
        m = SPEAKER.match(s)
        if m:
            flush()
            speaker, speech = title(m.group(1)), []
            continue
        if s and speaker:
            s = clean(s)
            if s:
                speech.append(s)
        elif not s and speech:
            flush()
            speech = []
    flush()
    return "\n".join(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("texts", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--target", type=int, default=TARGET)
    args = ap.parse_args(argv)
    parts, size = [], 0
    for play in PLAYS:
        body = play_dialogue((args.texts / f"{play}_gut.txt").read_text(encoding="latin-1"))
        parts.append(body)
        size += len(body) + 1
        if size >= args.target:
            break
    corpus = "\n".join(parts)[: args.target]
    corpus = corpus[: corpus.rfind("\n\n") + 1]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(corpus, encoding="utf-8")
    print(f"wrote {len(corpus):,} chars, vocab {len(set(corpus))} -> {args.out}")


if __name__ == "__main__":
    main()
