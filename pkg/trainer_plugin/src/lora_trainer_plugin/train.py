"""Hook entry point: train, serve, write the completion manifest.

Invoked by the pipeline's trainer gateway as
    python -m lora_trainer_plugin.train <train_file> <base> <out_dir>
with TRAINER_EPOCHS and TRAINER_OPT_* carrying the hyperparameters. On
success the manifest {checkpoint_id, base_url, model_id} is written atomically
into <out_dir> and the process exits 0; the serving process outlives the hook.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import requests

from .training import PluginConfig, run_training

MODEL_ID = "lora-student"
SERVER_STARTUP_TIMEOUT_S = 60.0


def _checkpoint_id(train_file: Path, base: str) -> str:
    digest = hashlib.sha256(train_file.read_bytes() + base.encode("utf-8"))
    return "lora-" + digest.hexdigest()[:12]


def launch_server(checkpoint_dir: Path, port: int, out_dir: Path) -> tuple[int, int]:
    """Start the serving process detached; return (port, pid) once healthy."""
    announce = checkpoint_dir / "server.json"
    if announce.exists():
        announce.unlink()
    log_file = (out_dir / "server.log").open("ab")
    process = subprocess.Popen(
        [sys.executable, "-m", "lora_trainer_plugin.serve", str(checkpoint_dir),
         "--port", str(port), "--announce", str(announce)],
        stdout=log_file, stderr=log_file, start_new_session=True)
    deadline = time.monotonic() + SERVER_STARTUP_TIMEOUT_S
    while time.monotonic() < deadline:
        if process.poll() is not None:
            raise RuntimeError(f"server exited early with {process.returncode}; "
                               f"see {out_dir / 'server.log'}")
        if announce.exists():
            info = json.loads(announce.read_text(encoding="utf-8"))
            try:
                health = requests.get(
                    f"http://127.0.0.1:{info['port']}/health", timeout=2)
                if health.status_code == 200:
                    return info["port"], info["pid"]
            except requests.ConnectionError:
                pass
        time.sleep(0.2)
    process.terminate()
    raise RuntimeError("server did not become healthy in time")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("train_file")
    parser.add_argument("base", help="base model directory or identifier")
    parser.add_argument("out_dir")
    args = parser.parse_args(argv)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = PluginConfig.from_env(base_model=args.base, output_dir=str(out_dir))
    print(f"training config: {config.summary()}", flush=True)

    checkpoint_dir = run_training(args.train_file, config)
    print(f"checkpoint saved to {checkpoint_dir}", flush=True)

    manifest = {
        "checkpoint_id": _checkpoint_id(Path(args.train_file), args.base),
        "model_id": MODEL_ID,
        "adapters_merged": True,
    }
    if config.serve:
        port, pid = launch_server(checkpoint_dir, config.serve_port, out_dir)
        manifest["base_url"] = f"http://127.0.0.1:{port}"
        manifest["server_pid"] = pid
        print(f"serving on port {port} (pid {pid})", flush=True)
    else:
        manifest["base_url"] = checkpoint_dir.resolve().as_uri()

    manifest_path = out_dir / "manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, manifest_path)
    print(f"manifest written to {manifest_path}", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
