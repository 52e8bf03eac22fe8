"""Reference trainer hook: fine-tunes a causal LM with low-rank adapters on an
instruction-tuning file and serves the result behind a chat-completions API.
"""

__version__ = "0.1.0"
