"""Persistent client dropout in asynchronous decentralized federated learning."""
