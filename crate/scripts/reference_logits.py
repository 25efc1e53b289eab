#!/usr/bin/env python3
"""Reference-runtime goldens for lensflow.

Two modes:

  tiny   build the random-weight GPT-2 test fixture (real GPT-2 vocabulary,
         tiny hidden size) under crates/core/tests/fixtures/tiny-gpt2 and
         record Hugging Face `transformers` logits for the parity suite.

  model  record goldens for an existing checkpoint directory (for example
         GPT-2 small) so the acceptance suite can run logit parity on it.

Tokenizer goldens are produced with tiktoken (independent byte-level BPE)
and cross-checked against the transformers GPT2Tokenizer.
"""

import argparse
import json
import os

import numpy as np
import tiktoken
import torch
from safetensors.numpy import save_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

GPT2_PATTERN = r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""

PARITY_PROMPTS = [
    "When Mary and John went to the store, John gave a drink to",
    "The capital of Japan is the city of",
    "The capital of Norway is",
    "The Eiffel Tower is located in the city of",
    "Hello world",
    "Microsoft was founded by Bill",
    "The official language of Brazil is",
    "In physics, string theory is a theoretical framework in which",
    "The mother tongue of Danielle Darrieux is",
    "Toko Yasuda plays the instrument",
    "1, 2, 3, 4, 5,",
    "She said: \"I can't believe it's already over!\"",
    "The quick brown fox jumps over the lazy",
    "Apple's headquarters are in Cupertino, California, and its CEO is",
    "def fibonacci(n):\n    return",
    "The chemical symbol for gold is",
    "Barack Obama was born in",
    "Après la pluie, le beau temps. Ça va?",
    "    indented   text with  multiple   spaces",
    "Tokyo",
]

TOKENIZER_CASES = [
    "Hello world",
    "",
    "The capital of Norway is",
    "The capital of Japan is the city of",
    "When Mary and John went to the store, John gave a drink to",
    " Mary",
    "Mary",
    "the",
    "It's 2023: numbers 12345 and ,,, punctuation!!",
    "  leading and trailing  ",
    "line one\nline two\n\n\tTabbed",
    "naïve café – emoji 🎉 and 日本語",
    "I'll've they're we'd you've",
]


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def tiktoken_encoding(vocab_path):
    vocab = json.load(open(vocab_path, encoding="utf-8"))
    decoder = {v: k for k, v in bytes_to_unicode().items()}
    ranks = {}
    for token, idx in vocab.items():
        if token == "<|endoftext|>":
            continue
        ranks[bytes(decoder[c] for c in token)] = idx
    return tiktoken.Encoding(
        name="gpt2-local",
        pat_str=GPT2_PATTERN,
        mergeable_ranks=ranks,
        special_tokens={"<|endoftext|>": vocab["<|endoftext|>"]},
    )


def tokenizer_goldens(model_dir):
    enc = tiktoken_encoding(os.path.join(model_dir, "vocab.json"))
    hf = GPT2Tokenizer(os.path.join(model_dir, "vocab.json"), os.path.join(model_dir, "merges.txt"))
    cases = []
    for text in TOKENIZER_CASES:
        ids = enc.encode_ordinary(text)
        hf_ids = hf.encode(text)
        assert ids == hf_ids, (text, ids, hf_ids)
        cases.append({"text": text, "ids": ids})
    return enc, cases


def record(model, enc, out_dir):
    model.eval()
    logits_rows, hidden_rows, parity = [], [], []
    with torch.no_grad():
        for prompt in PARITY_PROMPTS:
            ids = enc.encode_ordinary(prompt)
            out = model(torch.tensor([ids]), output_hidden_states=True)
            logits_rows.append(out.logits[0, -1].float().numpy())
            # hidden_states[l] is the input of block l; the last entry already
            # went through ln_f in transformers, so keep only block inputs.
            hs = [h[0, -1].float().numpy() for h in out.hidden_states[:-1]]
            hidden_rows.append(np.stack(hs))
            parity.append({"prompt": prompt, "ids": ids, "argmax": int(out.logits[0, -1].argmax())})
    save_file(
        {
            "logits": np.stack(logits_rows).astype(np.float32),
            "block_inputs": np.stack(hidden_rows).astype(np.float32),
        },
        os.path.join(out_dir, "reference_logits.safetensors"),
    )
    return parity


def build_tiny(out_dir, seed):
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=50257,
        n_positions=64,
        n_embd=32,
        n_layer=2,
        n_head=4,
        n_inner=None,
        layer_norm_epsilon=1e-5,
        tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif "ln_" in name and name.endswith(".bias"):
                p.copy_(0.1 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.05 * torch.randn_like(p))
            elif "wte" in name:
                p.copy_(0.1 * torch.randn_like(p))
            else:
                p.copy_(0.15 * torch.randn_like(p))
        # the fixture is stored in f16; compute goldens from the rounded weights
        for p in model.parameters():
            p.copy_(p.half().float())
    tensors = {}
    for name, p in model.state_dict().items():
        if name == "lm_head.weight" or name.endswith(".attn.bias") or name.endswith(".attn.masked_bias"):
            continue
        tensors[name] = p.detach().half().numpy()
    save_file(tensors, os.path.join(out_dir, "model.safetensors"), metadata={"format": "pt"})
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(
            {
                "model_type": "gpt2",
                "n_layer": 2,
                "n_head": 4,
                "n_embd": 32,
                "n_inner": None,
                "vocab_size": 50257,
                "n_positions": 64,
                "layer_norm_epsilon": 1e-5,
            },
            f,
            indent=2,
        )
    return model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("mode", choices=["tiny", "model"])
    ap.add_argument("--dir", required=True, help="fixture or checkpoint directory")
    ap.add_argument("--seed", type=int, default=20231015)
    args = ap.parse_args()

    enc, cases = tokenizer_goldens(args.dir)
    if args.mode == "tiny":
        model = build_tiny(args.dir, args.seed)
    else:
        model = GPT2LMHeadModel.from_pretrained(args.dir, torch_dtype=torch.float32)
    parity = record(model, enc, args.dir)
    with open(os.path.join(args.dir, "reference.json"), "w", encoding="utf-8") as f:
        json.dump({"tokenizer": cases, "parity": parity}, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main()
