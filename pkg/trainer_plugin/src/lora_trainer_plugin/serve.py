"""Minimal chat-completions server over a saved checkpoint directory.

Speaks exactly the wire shape the pipeline's client sends: POST
.../chat/completions with {model, messages, temperature, max_tokens}; the
answer is choices[0].message.content. Generation is greedy at temperature 0
and sampled otherwise, serialized behind a lock (one model, CPU).
"""

from __future__ import annotations

import argparse
import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer


class ModelRuntime:
    def __init__(self, checkpoint_dir: str, max_new_tokens_cap: int = 32):
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint_dir)
        self.model = AutoModelForCausalLM.from_pretrained(checkpoint_dir)
        self.model.eval()
        self.lock = threading.Lock()
        self.max_new_tokens_cap = max_new_tokens_cap

    def generate(self, prompt: str, temperature: float, max_tokens: int) -> str:
        pad_id = self.tokenizer.pad_token_id or self.tokenizer.eos_token_id
        encoded = self.tokenizer(prompt, add_special_tokens=False,
                                 return_tensors="pt")
        kwargs = dict(
            max_new_tokens=max(1, min(max_tokens, self.max_new_tokens_cap)),
            pad_token_id=pad_id,
        )
        if temperature and temperature > 0:
            kwargs.update(do_sample=True, temperature=temperature)
        else:
            kwargs.update(do_sample=False)
        with self.lock, torch.no_grad():
            generated = self.model.generate(**encoded, **kwargs)
        new_tokens = generated[0][encoded["input_ids"].shape[1]:]
        return self.tokenizer.decode(new_tokens, skip_special_tokens=True)


class _Handler(BaseHTTPRequestHandler):
    def do_GET(self):  # noqa: N802
        if self.path.rstrip("/").endswith("health"):
            self._reply(200, {"status": "ok"})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):  # noqa: N802
        if not self.path.rstrip("/").endswith("chat/completions"):
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length))
            messages = body.get("messages") or []
            prompt = messages[-1]["content"] if messages else ""
            text = self.server.runtime.generate(
                prompt,
                temperature=float(body.get("temperature") or 0.0),
                max_tokens=int(body.get("max_tokens") or 16),
            )
        except Exception as e:  # surface as a 500 the client can retry/log
            self._reply(500, {"error": str(e)})
            return
        self._reply(200, {
            "model": body.get("model", "lora-student"),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
        })

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("checkpoint_dir")
    parser.add_argument("--port", type=int, default=0, help="0 picks a free port")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--announce", default=None,
                        help="file to write {port, pid} once the server is bound")
    args = parser.parse_args(argv)

    runtime = ModelRuntime(args.checkpoint_dir)
    server = ThreadingHTTPServer((args.host, args.port), _Handler)
    server.runtime = runtime
    if args.announce:
        announce = Path(args.announce)
        tmp = announce.with_suffix(announce.suffix + ".tmp")
        tmp.write_text(json.dumps({
            "port": server.server_address[1],
            "pid": os.getpid(),
        }), encoding="utf-8")
        os.replace(tmp, announce)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
