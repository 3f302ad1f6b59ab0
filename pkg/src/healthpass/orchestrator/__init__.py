"""Workflow server: state-machine engine, audit log, policy, HTTP API."""
