"""Fixtures: a tiny base model pretrained on the QA answer format with a
systematic noun rule, and a 50-record toy training set that reverses the rule,
so adapter fine-tuning produces a large, measurable accuracy change.
"""

from __future__ import annotations

import json
import os
import random
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest
import requests
import torch
from tokenizers import Tokenizer, models, pre_tokenizers, trainers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

NOUNS = ["stone", "water", "tree", "cloud", "dream", "hope", "wind", "fire",
         "road", "storm", "story", "song", "light", "shadow", "coin", "leaf",
         "river", "idea", "mind", "rock"]
VERBS = ["grasp", "run", "soar", "climb", "digest", "sprint", "flow", "burn",
         "sail", "carve", "melt", "drift", "weave", "fold", "spin", "pour",
         "slide", "bloom", "crack", "hum"]
YES_NOUNS = set(NOUNS[:10])

QA_TEMPLATE = ("Is the word '{target}' in the sentence '{sentence}' used "
               "metaphorically? Please answer with 'Yes' or 'No' only.")


def make_example(noun: str, verb: str, noun2: str, idx: int, answer_yes: bool):
    sentence = f"The {noun} {verb}s near the {noun2} case {idx}."
    target = f"{verb}s"
    return {
        "sentence": sentence,
        "target_word": target,
        "instruction": QA_TEMPLATE.format(target=target, sentence=sentence),
        "output": "Yes" if answer_yes else "No",
    }


def pretrain_examples() -> list[dict]:
    rng = random.Random(1)
    return [make_example(noun := rng.choice(NOUNS), rng.choice(VERBS),
                         rng.choice(NOUNS), j, noun in YES_NOUNS)
            for j in range(300)]


def toy_examples() -> list[dict]:
    # same format, reversed noun rule: the base model starts out wrong everywhere
    out = []
    for i in range(50):
        noun = NOUNS[i % 20]
        out.append(make_example(noun, VERBS[(i * 7) % 20], NOUNS[(i * 3) % 20],
                                1000 + i, noun not in YES_NOUNS))
    return out


def _encode(tokenizer, example):
    prompt = tokenizer(example["instruction"] + "\n",
                       add_special_tokens=False)["input_ids"]
    answer = tokenizer(example["output"], add_special_tokens=False)["input_ids"]
    answer = answer + [tokenizer.eos_token_id]
    return prompt + answer, [-100] * len(prompt) + answer


@pytest.fixture(scope="session")
def base_model_dir(tmp_path_factory) -> Path:
    """Build and format-pretrain the tiny base model (one-off, ~a minute)."""
    torch.manual_seed(0)
    examples = pretrain_examples() + toy_examples()
    corpus = [e["instruction"] + "\n" + e["output"] for e in examples]

    tok = Tokenizer(models.WordLevel(unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    tok.train_from_iterator(
        corpus, trainers.WordLevelTrainer(special_tokens=["[UNK]", "[PAD]", "[EOS]"]))
    tokenizer = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="[UNK]",
                                        pad_token="[PAD]", eos_token="[EOS]")
    config = GPT2Config(vocab_size=len(tokenizer), n_positions=128, n_embd=64,
                        n_layer=2, n_head=2,
                        bos_token_id=tokenizer.eos_token_id,
                        eos_token_id=tokenizer.eos_token_id)
    model = GPT2LMHeadModel(config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
    pretrain = pretrain_examples()
    for epoch in range(40):
        order = list(range(len(pretrain)))
        random.Random(epoch).shuffle(order)
        for start in range(0, len(order), 16):
            batch = [_encode(tokenizer, pretrain[i]) for i in order[start:start + 16]]
            width = max(len(ids) for ids, _ in batch)
            pad = tokenizer.pad_token_id
            input_ids = torch.tensor([ids + [pad] * (width - len(ids))
                                      for ids, _ in batch])
            labels = torch.tensor([lab + [-100] * (width - len(lab))
                                   for _, lab in batch])
            attention = torch.tensor([[1] * len(ids) + [0] * (width - len(ids))
                                      for ids, _ in batch])
            out = model(input_ids=input_ids, attention_mask=attention, labels=labels)
            out.loss.backward()
            optimizer.step()
            optimizer.zero_grad()

    target = tmp_path_factory.mktemp("base_model")
    model.eval()
    model.save_pretrained(target)
    tokenizer.save_pretrained(target)
    return target


@pytest.fixture(scope="session")
def toy_files(tmp_path_factory) -> dict[str, Path]:
    """The 50-record toy set in both external formats: the gateway's training
    export and the pipeline's canonical dataset schema."""
    directory = tmp_path_factory.mktemp("toy_data")
    train_path = directory / "train.jsonl"
    dataset_path = directory / "dataset.jsonl"
    with train_path.open("w", encoding="utf-8") as train, \
            dataset_path.open("w", encoding="utf-8") as dataset:
        for example in toy_examples():
            train.write(json.dumps({
                "instruction": example["instruction"],
                "input": "",
                "output": example["output"],
            }) + "\n")
            dataset.write(json.dumps({
                "sentence": example["sentence"],
                "target_word": example["target_word"],
                "label": "metaphor" if example["output"] == "Yes" else "literal",
            }) + "\n")
    return {"train": train_path, "dataset": dataset_path}


def serve_checkpoint(checkpoint_dir: Path, announce: Path) -> tuple[str, subprocess.Popen]:
    process = subprocess.Popen(
        [sys.executable, "-m", "lora_trainer_plugin.serve", str(checkpoint_dir),
         "--port", "0", "--announce", str(announce)],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline:
        if announce.exists():
            info = json.loads(announce.read_text())
            url = f"http://127.0.0.1:{info['port']}"
            try:
                if requests.get(url + "/health", timeout=2).status_code == 200:
                    return url, process
            except requests.ConnectionError:
                pass
        time.sleep(0.2)
    process.terminate()
    raise RuntimeError("serve process never became healthy")


def kill_pid(pid: int) -> None:
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        pass


@pytest.fixture(scope="session")
def trained(base_model_dir, toy_files, tmp_path_factory):
    """One full hook invocation driven through the pipeline's trainer gateway."""
    from cda_forge.client import EndpointConfig
    from cda_forge.trainer import CheckpointRef, TrainerConfig, train

    out_root = tmp_path_factory.mktemp("hook_out")
    trainer_config = TrainerConfig(
        hook=(f"{sys.executable} -m lora_trainer_plugin.train "
              "{train_file} {base} {out_dir}"),
        epochs=40,
        passthrough={"adapter_rank": 8, "adapter_alpha": 16,
                     "learning_rate": 2e-3, "batch_size": 16, "seed": 0},
        work_dir=str(out_root / "work"),
        manifest_timeout_s=120.0,
    )
    base = CheckpointRef(
        id="base", location=str(base_model_dir), parent=None,
        serving=EndpointConfig(base_url="http://127.0.0.1:9", model_id="base",
                               role="student"))
    started = time.monotonic()
    checkpoint = train(trainer_config, base, toy_files["train"],
                       out_dir=out_root / "out")
    duration = time.monotonic() - started
    manifest = json.loads((out_root / "out" / "manifest.json").read_text())
    yield {
        "checkpoint": checkpoint,
        "manifest": manifest,
        "out_dir": out_root / "out",
        "duration_s": duration,
        "base": base,
    }
    if "server_pid" in manifest:
        kill_pid(manifest["server_pid"])
