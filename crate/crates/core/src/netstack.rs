//! Ethernet II + IPv4 + UDP framing and the echo application.
//!
//! No ARP, options, or fragmentation: endpoints carry static MACs.

use thiserror::Error;

pub const ETH_HEADER: usize = 14;
pub const IPV4_HEADER: usize = 20;
pub const UDP_HEADER: usize = 8;
pub const HEADERS: usize = ETH_HEADER + IPV4_HEADER + UDP_HEADER;
/// Largest payload that fits a 1500-byte MTU.
pub const MAX_PAYLOAD: usize = 1472;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
const PROTO_UDP: u8 = 17;
const DEFAULT_TTL: u8 = 64;
const FLAG_DF: u16 = 0x4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UdpEndpoint {
    pub mac: [u8; 6],
    pub ipv4: [u8; 4],
    pub port: u16,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
pub struct PayloadTooLarge(pub usize);

/// Why a frame was not accepted as a UDP datagram.
#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum Reject {
    #[error("frame shorter than the headers")]
    Truncated,
    #[error("ethertype is not IPv4")]
    NotIpv4,
    #[error("IP version is not 4")]
    BadVersion,
    #[error("IPv4 header length unsupported")]
    BadHeaderLength,
    #[error("IPv4 total length inconsistent with frame")]
    BadTotalLength,
    #[error("IPv4 header checksum mismatch")]
    IpChecksum,
    #[error("fragmented datagram")]
    Fragmented,
    #[error("protocol is not UDP")]
    NotUdp,
    #[error("UDP length inconsistent with IPv4 length")]
    BadUdpLength,
    #[error("UDP checksum missing or wrong")]
    UdpChecksum,
}

/// A decoded datagram borrowing its payload from the frame.
#[derive(Debug, PartialEq, Eq)]
pub struct Datagram<'a> {
    pub src: UdpEndpoint,
    pub dst: UdpEndpoint,
    pub payload: &'a [u8],
}

/// RFC 1071 ones-complement sum over the concatenation of `parts`.
pub fn internet_checksum(parts: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    let mut odd: Option<u8> = None;
    for part in parts {
        for &b in *part {
            match odd.take() {
                Some(hi) => sum += u16::from_be_bytes([hi, b]) as u32,
                None => odd = Some(b),
            }
        }
    }
    if let Some(hi) = odd {
        sum += u16::from_be_bytes([hi, 0]) as u32;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn udp_checksum(src: [u8; 4], dst: [u8; 4], udp: &[u8]) -> u16 {
    let len = (udp.len() as u16).to_be_bytes();
    let pseudo = [
        src[0], src[1], src[2], src[3], dst[0], dst[1], dst[2], dst[3], 0, PROTO_UDP, len[0],
        len[1],
    ];
    match internet_checksum(&[&pseudo, udp]) {
        0 => 0xffff,
        c => c,
    }
}

pub fn encode_udp(
    src: &UdpEndpoint,
    dst: &UdpEndpoint,
    payload: &[u8],
) -> Result<Vec<u8>, PayloadTooLarge> {
    if payload.len() > MAX_PAYLOAD {
        return Err(PayloadTooLarge(payload.len()));
    }
    let udp_len = (UDP_HEADER + payload.len()) as u16;
    let total_len = IPV4_HEADER as u16 + udp_len;
    let mut f = Vec::with_capacity(HEADERS + payload.len());

    f.extend_from_slice(&dst.mac);
    f.extend_from_slice(&src.mac);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip_start = f.len();
    f.push(0x45);
    f.push(0);
    f.extend_from_slice(&total_len.to_be_bytes());
    f.extend_from_slice(&0u16.to_be_bytes());
    f.extend_from_slice(&FLAG_DF.to_be_bytes());
    f.push(DEFAULT_TTL);
    f.push(PROTO_UDP);
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(&src.ipv4);
    f.extend_from_slice(&dst.ipv4);
    let ip_sum = internet_checksum(&[&f[ip_start..]]);
    f[ip_start + 10..ip_start + 12].copy_from_slice(&ip_sum.to_be_bytes());

    let udp_start = f.len();
    f.extend_from_slice(&src.port.to_be_bytes());
    f.extend_from_slice(&dst.port.to_be_bytes());
    f.extend_from_slice(&udp_len.to_be_bytes());
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(payload);
    let u_sum = udp_checksum(src.ipv4, dst.ipv4, &f[udp_start..]);
    f[udp_start + 6..udp_start + 8].copy_from_slice(&u_sum.to_be_bytes());
    Ok(f)
}

pub fn decode_udp(frame: &[u8]) -> Result<Datagram<'_>, Reject> {
    if frame.len() < ETH_HEADER + 1 {
        return Err(Reject::Truncated);
    }
    if u16::from_be_bytes([frame[12], frame[13]]) != ETHERTYPE_IPV4 {
        return Err(Reject::NotIpv4);
    }
    let ip = &frame[ETH_HEADER..];
    if ip[0] >> 4 != 4 {
        return Err(Reject::BadVersion);
    }
    if ip[0] & 0xf != 5 {
        return Err(Reject::BadHeaderLength);
    }
    if ip.len() < IPV4_HEADER {
        return Err(Reject::BadHeaderLength);
    }
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if total < IPV4_HEADER + UDP_HEADER || total > ip.len() {
        return Err(Reject::BadTotalLength);
    }
    if internet_checksum(&[&ip[..IPV4_HEADER]]) != 0 {
        return Err(Reject::IpChecksum);
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x3fff != 0 {
        return Err(Reject::Fragmented);
    }
    if ip[9] != PROTO_UDP {
        return Err(Reject::NotUdp);
    }
    let src_ip: [u8; 4] = ip[12..16].try_into().unwrap();
    let dst_ip: [u8; 4] = ip[16..20].try_into().unwrap();
    let udp = &ip[IPV4_HEADER..total];
    let udp_len = u16::from_be_bytes([udp[4], udp[5]]) as usize;
    if udp_len != udp.len() {
        return Err(Reject::BadUdpLength);
    }
    // zero would mean "no checksum"; this stack always sends one
    let stored = u16::from_be_bytes([udp[6], udp[7]]);
    if stored == 0 {
        return Err(Reject::UdpChecksum);
    }
    let len = (udp.len() as u16).to_be_bytes();
    let pseudo = [
        src_ip[0], src_ip[1], src_ip[2], src_ip[3], dst_ip[0], dst_ip[1], dst_ip[2], dst_ip[3], 0,
        PROTO_UDP, len[0], len[1],
    ];
    if internet_checksum(&[&pseudo, udp]) != 0 {
        return Err(Reject::UdpChecksum);
    }
    let mac = |r: std::ops::Range<usize>| -> [u8; 6] { frame[r].try_into().unwrap() };
    Ok(Datagram {
        src: UdpEndpoint {
            mac: mac(6..12),
            ipv4: src_ip,
            port: u16::from_be_bytes([udp[0], udp[1]]),
        },
        dst: UdpEndpoint {
            mac: mac(0..6),
            ipv4: dst_ip,
            port: u16::from_be_bytes([udp[2], udp[3]]),
        },
        payload: &udp[UDP_HEADER..],
    })
}

/// Echo server step: the reply to `frame`, or `None` if it is not a valid
/// UDP datagram.
pub fn echo_step(frame: &[u8]) -> Option<Vec<u8>> {
    let d = decode_udp(frame).ok()?;
    encode_udp(&d.dst, &d.src, d.payload).ok()
}
