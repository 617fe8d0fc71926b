"""Agent-based simulator of meme spreading on social networks infiltrated by bots."""

__version__ = "0.1.0"
