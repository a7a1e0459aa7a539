"""ConvMFiT: conversation-model fine-tuning for counseling utterance classification."""
__version__ = "0.1.0"
