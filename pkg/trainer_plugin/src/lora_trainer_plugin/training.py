"""Adapter fine-tuning on an exported instruction-tuning file.

The training file is line-delimited {instruction, input, output} records; the
prompt tokens are masked out of the loss so only the answer (and EOS) train.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .adapters import inject_adapters, merge_adapters

DEFAULT_TARGETS = ("c_attn", "c_proj", "c_fc", "lm_head",
                   "q_proj", "k_proj", "v_proj", "o_proj")


@dataclass
class PluginConfig:
    """Hyperparameters, defaulting to the standard adapter setup (rank 8,
    alpha 16, lr 2e-4, 3 epochs); every field can be overridden through the
    gateway's TRAINER_EPOCHS / TRAINER_OPT_* environment passthrough."""

    base_model: str
    output_dir: str
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    learning_rate: float = 2e-4
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    adapter_targets: tuple[str, ...] = DEFAULT_TARGETS
    serve: bool = True
    serve_port: int = 0
    max_new_tokens: int = 16

    @classmethod
    def from_env(cls, base_model: str, output_dir: str,
                 env: dict[str, str] | None = None) -> "PluginConfig":
        env = dict(os.environ if env is None else env)
        config = cls(base_model=base_model, output_dir=output_dir)
        if "TRAINER_EPOCHS" in env:
            config.epochs = int(env["TRAINER_EPOCHS"])
        mapping = {
            "TRAINER_OPT_ADAPTER_RANK": ("adapter_rank", int),
            "TRAINER_OPT_ADAPTER_ALPHA": ("adapter_alpha", float),
            "TRAINER_OPT_LEARNING_RATE": ("learning_rate", float),
            "TRAINER_OPT_BATCH_SIZE": ("batch_size", int),
            "TRAINER_OPT_SEED": ("seed", int),
            "TRAINER_OPT_SERVE_PORT": ("serve_port", int),
            "TRAINER_OPT_MAX_NEW_TOKENS": ("max_new_tokens", int),
        }
        for key, (attr, cast) in mapping.items():
            if key in env:
                setattr(config, attr, cast(env[key]))
        if "TRAINER_OPT_SERVE" in env:
            config.serve = env["TRAINER_OPT_SERVE"].strip().lower() not in (
                "0", "false", "no", "off")
        if "TRAINER_OPT_ADAPTER_TARGETS" in env:
            config.adapter_targets = tuple(
                t.strip() for t in env["TRAINER_OPT_ADAPTER_TARGETS"].split(",")
                if t.strip())
        return config

    def summary(self) -> dict:
        return {
            "base_model": self.base_model,
            "adapter_rank": self.adapter_rank,
            "adapter_alpha": self.adapter_alpha,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "adapter_targets": list(self.adapter_targets),
        }


def load_records(train_file: str | Path) -> list[dict]:
    records = []
    with Path(train_file).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            for key in ("instruction", "output"):
                if key not in record:
                    raise ValueError(f"line {line_no}: missing field {key!r}")
            records.append(record)
    if not records:
        raise ValueError(f"no records in {train_file}")
    return records


def _encode(tokenizer, record: dict) -> tuple[list[int], list[int]]:
    prompt = record["instruction"]
    if record.get("input"):
        prompt += "\n" + record["input"]
    prompt_ids = tokenizer(prompt + "\n", add_special_tokens=False)["input_ids"]
    answer_ids = tokenizer(record["output"], add_special_tokens=False)["input_ids"]
    answer_ids = answer_ids + [tokenizer.eos_token_id]
    return prompt_ids + answer_ids, [-100] * len(prompt_ids) + answer_ids


def _batches(records: list[dict], batch_size: int, epoch: int, seed: int):
    order = list(range(len(records)))
    random.Random(seed * 100_003 + epoch).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def run_training(train_file: str | Path, config: PluginConfig) -> Path:
    """Fine-tune, merge the adapters, and save a servable checkpoint.

    Returns the checkpoint directory; a training_log.json with per-step losses
    and the effective configuration lands next to it in output_dir.
    """
    torch.manual_seed(config.seed)
    records = load_records(train_file)
    tokenizer = AutoTokenizer.from_pretrained(config.base_model)
    model = AutoModelForCausalLM.from_pretrained(config.base_model)
    model.train()

    injected = inject_adapters(model, config.adapter_rank, config.adapter_alpha,
                               config.adapter_targets)
    if injected == 0:
        raise RuntimeError(
            f"no adapter targets matched {config.adapter_targets} in the base model")
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate)

    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = tokenizer.eos_token_id
    steps: list[dict] = []
    for epoch in range(config.epochs):
        for batch in _batches(records, config.batch_size, epoch, config.seed):
            encoded = [_encode(tokenizer, r) for r in batch]
            width = max(len(ids) for ids, _ in encoded)
            input_ids = torch.tensor(
                [ids + [pad_id] * (width - len(ids)) for ids, _ in encoded])
            labels = torch.tensor(
                [lab + [-100] * (width - len(lab)) for _, lab in encoded])
            attention = torch.tensor(
                [[1] * len(ids) + [0] * (width - len(ids)) for ids, _ in encoded])
            out = model(input_ids=input_ids, attention_mask=attention, labels=labels)
            out.loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            steps.append({"step": len(steps), "epoch": epoch,
                          "loss": round(out.loss.item(), 6)})

    merge_adapters(model)
    model.eval()

    output_dir = Path(config.output_dir)
    checkpoint_dir = output_dir / "checkpoint"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(checkpoint_dir)
    tokenizer.save_pretrained(checkpoint_dir)

    log = {
        "config": config.summary(),
        "n_records": len(records),
        "adapters_injected": injected,
        "steps": steps,
        "first_loss": steps[0]["loss"],
        "last_loss": steps[-1]["loss"],
    }
    log_path = output_dir / "training_log.json"
    tmp = log_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(log, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, log_path)
    return checkpoint_dir
