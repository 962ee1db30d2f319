"""Lossy DC power flow."""
