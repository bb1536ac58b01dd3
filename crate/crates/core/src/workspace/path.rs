use super::WorkspaceError;

/// Normalizes a workspace-relative path.
///
/// Empty and `.` segments are dropped. Absolute paths, `..` segments,
/// backslashes, drive prefixes and control characters are rejected before
/// anything touches the filesystem.
pub fn normalize_rel_path(raw: &str) -> Result<String, WorkspaceError> {
    if raw.starts_with('/') {
        return Err(WorkspaceError::Security(format!("absolute path `{raw}`")));
    }
    if raw.contains('\\') {
        return Err(WorkspaceError::Security(format!("backslash in path `{raw}`")));
    }
    if raw.chars().any(char::is_control) {
        return Err(WorkspaceError::Security("control character in path".into()));
    }
    let mut segments = Vec::new();
    for segment in raw.split('/') {
        match segment {
            "" | "." => continue,
            ".." => {
                return Err(WorkspaceError::Security(format!(
                    "parent-directory segment in `{raw}`"
                )))
            }
            s if s.len() >= 2 && s.as_bytes()[1] == b':' && segments.is_empty() => {
                return Err(WorkspaceError::Security(format!("drive prefix in `{raw}`")))
            }
            s => segments.push(s),
        }
    }
    if segments.is_empty() {
        return Err(WorkspaceError::Validation("empty path".into()));
    }
    Ok(segments.join("/"))
}
