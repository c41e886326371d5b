"""Maximum-mutual-information response generation on a small LSTM seq2seq."""

__version__ = "0.1.0"
