// SPDX-License-Identifier: Apache-2.0
//! The `warpforge` command line and HTTP service.

pub mod commands;
pub mod error;
pub mod service;
