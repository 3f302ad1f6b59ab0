"""Holder/verifier client: encrypted local store, server client, CLI."""
