"""Command-mode fine-tune worker.

The orchestrator invokes this package as an external command with four
environment variables (train file, base model, epochs, output directory),
reads the last non-empty stdout line as the new model identifier, and
treats exit code 0 as success. The package has no runtime dependency on
the orchestrator: the chat-format training schema is the shared contract.
"""

__version__ = "0.1.0"
