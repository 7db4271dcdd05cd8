# SPDX-License-Identifier: MIT OR Apache-2.0
"""Regenerates the reference fixtures used by the Rust tests.

Requires torch, transformers and safetensors. Writes:
  vocab.txt                     small uncased WordPiece vocabulary
  tokenizer_cases.json          reference token ids from transformers.BertTokenizer
  tiny_distilbert.safetensors   randomly initialised 2-layer DistilBertModel
  tiny_distilbert_config.json   its config
  tiny_distilbert_expected.json reference last hidden states for a few inputs
"""
import json
import os
import string

import torch
from safetensors.torch import save_file
from transformers import BertTokenizer, DistilBertConfig, DistilBertModel

HERE = os.path.dirname(os.path.abspath(__file__))

WORDS = """the of and to in is was for on are with as by at from that this it be or an
what who when where how why which does do can many much long cost average
college wellesley university school student students class year years
water river sea ocean lake rain cloud weather climate temperature
city town country state capital population people family house home
food eat fruit apple bread milk coffee tea sugar salt
doctor health body heart blood pain disease treatment hospital medicine
car road train bus travel trip flight airport distance mile miles
money price pay bank tax job work salary company business
music song play game sport team ball football
history war king queen law court government president
computer phone data software internet system network
animal dog cat bird fish horse tree plant flower leaf
time day week month hour minute night morning
number one two three four five ten hundred first second
make made use used take get give find know called means definition
large small high low new old good best great big
""".split()

SPECIAL = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def build_vocab():
    toks = list(SPECIAL)
    toks += list(string.punctuation)
    toks += list(string.ascii_lowercase)
    toks += ["##" + c for c in string.ascii_lowercase]
    toks += [str(d) for d in range(10)] + ["##" + str(d) for d in range(10)]
    toks += ["gu", "##anta", "##namo", "well", "##es", "##ley", "##s", "##ing", "##ed"]
    toks += ["北", "京", "大", "学", "水", "的"]
    toks += ["cafe", "naive", "un", "##aff", "##able"]
    seen = set()
    out = []
    for t in toks + WORDS:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def main():
    vocab = build_vocab()
    with open(os.path.join(HERE, "vocab.txt"), "w") as f:
        f.write("\n".join(vocab) + "\n")

    tok = BertTokenizer(os.path.join(HERE, "vocab.txt"), do_lower_case=True)
    cases = [
        "what is wellesley",
        "What is Wellesley College?",
        "",
        "The river's temperature (in °C) was 12.5, not 13!",
        "Café naïve résumé",
        "北京大学 is a university",
        "unaffable guantanamo xylophone",
        "hello\tworld\nnew line",
        "a" * 120,
        "don't stop-believing; e-mail: x@y.z",
    ]
    out = []
    for c in cases:
        ids = tok(c, add_special_tokens=True)["input_ids"]
        out.append({"text": c, "ids": ids})
    for w in ["a", "guantanamo", "wellesley", "xylophone", "college"]:
        out.append({"word": w, "count": len(tok.tokenize(w))})
    with open(os.path.join(HERE, "tokenizer_cases.json"), "w") as f:
        json.dump(out, f, indent=1, ensure_ascii=False)

    torch.manual_seed(1234)
    cfg = DistilBertConfig(
        vocab_size=len(vocab), dim=8, n_layers=2, n_heads=2, hidden_dim=16,
        max_position_embeddings=64, dropout=0.0, attention_dropout=0.0,
        activation="gelu", sinusoidal_pos_embds=False,
    )
    model = DistilBertModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.randn_like(p) * (0.5 if p.dim() > 1 else 0.2) + (1.0 if "LayerNorm" in name or "layer_norm" in name and name.endswith("weight") else 0.0))
    state = {k: v.contiguous().float() for k, v in model.state_dict().items()}
    save_file(state, os.path.join(HERE, "tiny_distilbert.safetensors"))
    with open(os.path.join(HERE, "tiny_distilbert_config.json"), "w") as f:
        json.dump({"dim": 8, "n_layers": 2, "n_heads": 2, "hidden_dim": 16,
                   "vocab_size": len(vocab), "max_position_embeddings": 64}, f, indent=1)

    inputs = [
        {"ids": tok("what is wellesley")["input_ids"], "mask": None},
        {"ids": tok("The river's temperature was 12.5")["input_ids"], "mask": None},
    ]
    padded = tok("wellesley college")["input_ids"] + [0, 0, 0]
    inputs.append({"ids": padded, "mask": [1] * (len(padded) - 3) + [0, 0, 0]})
    expected = []
    with torch.no_grad():
        for inp in inputs:
            ids = torch.tensor([inp["ids"]])
            mask = torch.tensor([inp["mask"] if inp["mask"] else [1] * len(inp["ids"])])
            hs = model(input_ids=ids, attention_mask=mask).last_hidden_state[0]
            expected.append({"ids": inp["ids"], "mask": mask[0].tolist(), "hidden": hs.tolist()})
    with open(os.path.join(HERE, "tiny_distilbert_expected.json"), "w") as f:
        json.dump(expected, f, indent=1)


if __name__ == "__main__":
    main()
