"""Spiking Operator Surrogate - Utilities Package"""
