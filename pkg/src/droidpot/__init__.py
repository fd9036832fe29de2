"""Low-interaction honeypot suite posing as a rooted Android handset."""

__version__ = "0.1.0"
