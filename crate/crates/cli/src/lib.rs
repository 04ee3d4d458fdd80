//! Library side of the `bitvit` command-line tool: conversion, inspection,
//! self-verification, benchmarking and classification.

pub mod bench;
pub mod commands;
pub mod threads;
